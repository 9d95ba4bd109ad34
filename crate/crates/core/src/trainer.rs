//! Star-level splits, mini-batch training with AdamW and early stopping,
//! prediction and held-out evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{PreparedDataset, PreparedSample};
use crate::error::{Error, Result};
use crate::fusion::{fuse_vectors, pca_fit, FusedInput, FusionPca};
use crate::linalg::Matrix;
use crate::metrics::EvalReport;
use crate::model::{cross_entropy, Classifier, ModelConfig, ParamAudit};
use crate::peft::{AdamW, AdamWConfig, Parameters, TrainPolicy};
use crate::scalar::Scalar;
use crate::text_encoder::TextEncoderConfig;
use crate::windowing::PatchConfig;

const SPLIT_SALT: u64 = 0x5917_0000_0000_0001;
const SHUFFLE_SALT: u64 = 0x5917_0000_0000_0002;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub use_fhrs: bool,
    pub use_fsin: bool,
    pub use_lora: bool,
    pub use_adapter: bool,
    pub train_qkv_base: bool,
    /// Train, validation and test shares of the stars.
    pub split: [f64; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.01,
            max_epochs: 200,
            patience: 10,
            batch_size: 32,
            seed: 0,
            use_fhrs: true,
            use_fsin: true,
            use_lora: true,
            use_adapter: true,
            train_qkv_base: false,
            split: [0.70, 0.15, 0.15],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("max_epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "lr {} must be positive and weight_decay {} non-negative",
                self.lr, self.weight_decay
            )));
        }
        validate_fractions(&self.split)
    }

    pub fn policy(&self) -> TrainPolicy {
        TrainPolicy {
            train_qkv_base: self.train_qkv_base,
            enable_lora: self.use_lora,
            enable_adapter: self.use_adapter,
        }
    }
}

fn validate_fractions(f: &[f64; 3]) -> Result<()> {
    if f.iter().any(|&x| !(x >= 0.0 && x <= 1.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {f:?} must be in [0, 1] and sum to 1")));
    }
    Ok(())
}

/// Star counts by largest remainder: floors of `fraction · n`, then the
/// leftover stars go one each to the largest fractional parts, ties to the
/// earlier split.
pub fn split_sizes(n: usize, fractions: &[f64; 3]) -> Result<[usize; 3]> {
    validate_fractions(fractions)?;
    if n < 3 {
        return Err(Error::Validation(format!(
            "need at least 3 stars to form train/validation/test splits, found {n}"
        )));
    }
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    // guard against 0.7 · 10 landing a hair below 7
    let mut sizes: Vec<usize> = quotas.iter().map(|q| (q + 1e-9).floor() as usize).collect();
    let mut left = n - sizes.iter().sum::<usize>().min(n);
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - sizes[a] as f64;
        let rb = quotas[b] - sizes[b] as f64;
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    Ok([sizes[0], sizes[1], sizes[2]])
}

/// Shuffles the sorted star ids with `seed` and cuts them by [`split_sizes`].
pub fn split_by_star(stars: &[String], fractions: &[f64; 3], seed: u64) -> Result<[Vec<String>; 3]> {
    let mut ids: Vec<String> = stars.to_vec();
    ids.sort();
    ids.dedup();
    let sizes = split_sizes(ids.len(), fractions)?;
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT));
    let test = ids.split_off(sizes[0] + sizes[1]);
    let val = ids.split_off(sizes[0]);
    Ok([ids, val, test])
}

/// Held-out sample indices, readable only through [`SealedSplit::evaluate`].
#[derive(Debug, Clone, PartialEq)]
pub struct SealedSplit {
    indices: Vec<usize>,
}

impl SealedSplit {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn evaluate<T: Scalar>(&self, model: &TrainedModel<T>, data: &PreparedDataset<T>) -> Result<EvalReport> {
        evaluate_indices(model, data, &self.indices)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: SealedSplit,
    pub stars: [Vec<String>; 3],
}

pub fn split_dataset<T>(data: &PreparedDataset<T>, fractions: &[f64; 3], seed: u64) -> Result<Splits> {
    let stars = split_by_star(&data.stars(), fractions, seed)?;
    let mut which: BTreeMap<&str, usize> = BTreeMap::new();
    for (k, group) in stars.iter().enumerate() {
        for s in group {
            which.insert(s, k);
        }
    }
    let mut parts: [Vec<usize>; 3] = Default::default();
    for (i, s) in data.samples.iter().enumerate() {
        parts[which[s.star_id.as_str()]].push(i);
    }
    let [train, val, test] = parts;
    Ok(Splits {
        train,
        val,
        test: SealedSplit { indices: test },
        stars,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Tracks the best validation loss; stops after `patience` epochs without a
/// strict improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopDecision {
        match self.best {
            Some((_, b)) if !(loss < b) => {
                self.stale += 1;
                if self.stale >= self.patience {
                    StopDecision::Stop
                } else {
                    StopDecision::Continue
                }
            }
            _ => {
                self.best = Some((epoch, loss));
                self.stale = 0;
                StopDecision::Improved
            }
        }
    }

    /// `(epoch, loss)` of the best observation so far.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,lr\n");
    for r in history {
        writeln!(s, "{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.lr).unwrap();
    }
    s
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct TrainedModel<T> {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub patch: PatchConfig,
    pub patch_hash: String,
    pub text: TextEncoderConfig,
    pub text_digest: String,
    pub dataset_hash: String,
    pub classifier: Classifier<T>,
    pub pca: FusionPca<T>,
    pub optimizer: AdamW<T>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Hash of the frozen tensors, equal before and after training.
    pub frozen_digest: String,
    pub audit: ParamAudit,
    /// Same counts with the frozen text encoder included.
    pub audit_with_text: ParamAudit,
}

impl<T: Scalar> TrainedModel<T> {
    /// Fuses a prepared sample with the stored PCA models and ablation flags.
    pub fn fused(&self, s: &PreparedSample<T>) -> Result<FusedInput<T>> {
        let c = &self.train_config;
        let stats = if c.use_fsin { Some(self.pca.reduce_stats(&s.stats)?) } else { None };
        let hist = if c.use_fhrs { Some(self.pca.reduce_history(&s.history)?) } else { None };
        fuse_vectors(&s.light, stats.as_deref(), hist.as_deref())
    }

    /// `p(flare)` for a sample prepared under `patch_hash`.
    pub fn predict(&self, s: &PreparedSample<T>, patch_hash: &str) -> Result<T> {
        if patch_hash != self.patch_hash {
            return Err(Error::Config(format!(
                "sample prepared with window config {patch_hash}, model expects {}",
                self.patch_hash
            )));
        }
        Ok(self.classifier.probabilities(&self.fused(s)?)?[1])
    }
}

fn evaluate_indices<T: Scalar>(
    model: &TrainedModel<T>,
    data: &PreparedDataset<T>,
    indices: &[usize],
) -> Result<EvalReport> {
    let mut labels = Vec::with_capacity(indices.len());
    let mut probs = Vec::with_capacity(indices.len());
    for &i in indices {
        let s = &data.samples[i];
        labels.push(s.label);
        probs.push(model.predict(s, &data.patch_hash)?.to_f64_lossy());
    }
    EvalReport::from_probabilities(&labels, &probs)
}

fn fit_pca<T: Scalar>(
    data: &PreparedDataset<T>,
    train: &[usize],
    k: usize,
    cfg: &TrainConfig,
) -> Result<FusionPca<T>> {
    let fit = |pick: &dyn Fn(&PreparedSample<T>) -> &[T]| -> Result<_> {
        let rows: Vec<Vec<T>> = train.iter().map(|&i| pick(&data.samples[i]).to_vec()).collect();
        pca_fit(&Matrix::from_rows(&rows)?, k)
    };
    Ok(FusionPca {
        stats: if cfg.use_fsin { Some(fit(&|s| &s.stats)?) } else { None },
        history: if cfg.use_fhrs { Some(fit(&|s| &s.history)?) } else { None },
    })
}

fn mean_loss<T: Scalar>(model: &Classifier<T>, xs: &[(FusedInput<T>, bool)]) -> Result<f64> {
    let mut sum = 0.0;
    for (x, y) in xs {
        let (l, _) = cross_entropy(model.logits(x)?, *y);
        sum += l.to_f64_lossy();
    }
    Ok(sum / xs.len() as f64)
}

/// Trains on `splits.train`, early-stops on `splits.val` and returns the
/// weights of the best validation epoch.
pub fn train<T: Scalar>(
    data: &PreparedDataset<T>,
    splits: &Splits,
    model_config: ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainedModel<T>> {
    cfg.validate()?;
    if splits.train.len() < 2 || splits.val.is_empty() {
        return Err(Error::Validation(format!(
            "training needs at least 2 training and 1 validation sample, got {} and {}",
            splits.train.len(),
            splits.val.len()
        )));
    }
    if model_config.token_len != data.patch.token_len || model_config.tokens != data.patch.tokens() {
        return Err(Error::Config(format!(
            "model expects {} tokens of {}, data has {} of {}",
            model_config.tokens,
            model_config.token_len,
            data.patch.tokens(),
            data.patch.token_len
        )));
    }
    let mut classifier = Classifier::<T>::new(model_config, cfg.policy(), cfg.seed)?;
    let frozen_digest = classifier.frozen_digest();
    let pca = fit_pca(data, &splits.train, model_config.token_len, cfg)?;

    let mut trained = TrainedModel {
        model_config,
        train_config: *cfg,
        patch: data.patch,
        patch_hash: data.patch_hash.clone(),
        text: data.text,
        text_digest: data.text_digest.clone(),
        dataset_hash: data.dataset_hash.clone(),
        classifier: classifier.clone(),
        pca,
        optimizer: AdamW::new(AdamWConfig::default()),
        history: Vec::new(),
        best_epoch: 0,
        frozen_digest: frozen_digest.clone(),
        audit: classifier.audit(),
        audit_with_text: classifier.audit(),
    };
    let fuse_all = |idx: &[usize]| -> Result<Vec<(FusedInput<T>, bool)>> {
        idx.iter()
            .map(|&i| Ok((trained.fused(&data.samples[i])?, data.samples[i].label)))
            .collect()
    };
    let train_set = fuse_all(&splits.train)?;
    let val_set = fuse_all(&splits.val)?;

    let mut opt = AdamW::<T>::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_SALT);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best = (classifier.trainable_values(), opt.clone());
    let mut history = Vec::new();

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            classifier.zero_grad();
            let scale = T::one() / T::of(batch.len() as f64);
            for &i in batch {
                let (x, y) = &train_set[i];
                let loss = classifier.accumulate_loss(x, *y, scale).map_err(|e| match e {
                    Error::Numerical(m) => Error::Numerical(format!("epoch {epoch}: {m}")),
                    other => other,
                })?;
                total += loss.to_f64_lossy();
            }
            opt.step(&mut classifier)?;
        }
        let train_loss = total / train_set.len() as f64;
        let val_loss = mean_loss(&classifier, &val_set)?;
        if !val_loss.is_finite() {
            return Err(Error::Numerical(format!("epoch {epoch}: validation loss {val_loss}")));
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr: cfg.lr,
        });
        match stopper.observe(epoch, val_loss) {
            StopDecision::Improved => best = (classifier.trainable_values(), opt.clone()),
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }

    classifier.restore_trainable(&best.0);
    classifier.zero_grad();
    if classifier.frozen_digest() != frozen_digest {
        return Err(Error::State("frozen parameters changed during training".into()));
    }
    trained.audit = classifier.audit();
    trained.audit_with_text = trained.audit.with_frozen(text_param_count(&data.text));
    trained.classifier = classifier;
    trained.optimizer = best.1;
    trained.best_epoch = stopper.best().map_or(0, |b| b.0);
    trained.history = history;
    Ok(trained)
}

/// Parameter count of the text encoder described by `cfg`, without building it.
pub fn text_param_count(cfg: &TextEncoderConfig) -> usize {
    let e = &cfg.encoder;
    let d = e.d_model;
    let attn = 4 * (d * d + d) + 3 * e.lora_rank * 2 * d;
    let ln = 2 * 2 * d;
    let ffn = d * e.d_ffn + e.d_ffn + e.d_ffn * d + d;
    let adapter = 2 * d * e.adapter_dim;
    cfg.vocab.size as usize * d + e.layers * (attn + ln + ffn + adapter)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i:02}")).collect()
    }

    #[test]
    fn largest_remainder_sizes() {
        assert_eq!(split_sizes(10, &[0.7, 0.15, 0.15]).unwrap(), [7, 2, 1]);
        assert_eq!(split_sizes(200, &[0.7, 0.15, 0.15]).unwrap(), [140, 30, 30]);
        assert_eq!(split_sizes(3, &[0.7, 0.15, 0.15]).unwrap(), [2, 1, 0]);
        assert_eq!(split_sizes(4, &[0.5, 0.25, 0.25]).unwrap(), [2, 1, 1]);
        assert!(split_sizes(1, &[0.7, 0.15, 0.15]).is_err());
        assert!(split_sizes(10, &[0.7, 0.2, 0.2]).is_err());
    }

    #[test]
    fn star_split_is_a_deterministic_partition() {
        let stars = ids(23);
        let a = split_by_star(&stars, &[0.7, 0.15, 0.15], 5).unwrap();
        let b = split_by_star(&stars, &[0.7, 0.15, 0.15], 5).unwrap();
        assert_eq!(a, b);
        let mut all: Vec<String> = a.concat();
        all.sort();
        assert_eq!(all, stars);
        let c = split_by_star(&stars, &[0.7, 0.15, 0.15], 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn early_stopper_contract() {
        let mut s = EarlyStopper::new(1);
        assert_eq!(s.observe(0, 0.5), StopDecision::Improved);
        assert_eq!(s.observe(1, 0.6), StopDecision::Stop);
        assert_eq!(s.best(), Some((0, 0.5)));

        let mut s = EarlyStopper::new(3);
        let losses = [1.0, 0.9, 0.95, 0.9, 0.8, 0.85, 0.81, 0.82];
        let decisions: Vec<_> = losses.iter().enumerate().map(|(e, &l)| s.observe(e, l)).collect();
        assert_eq!(decisions[3], StopDecision::Continue);
        assert_eq!(decisions[4], StopDecision::Improved);
        assert_eq!(decisions[7], StopDecision::Stop);
        assert_eq!(s.best(), Some((4, 0.8)));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { patience: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig {
            split: [0.5, 0.5, 0.5],
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn text_count_matches_built_encoder() {
        let cfg = TextEncoderConfig::default();
        let te = crate::text_encoder::TextEncoder::<f32>::new(cfg).unwrap();
        assert_eq!(text_param_count(&cfg), te.param_count());
    }

    #[test]
    fn history_csv_layout() {
        let h = [EpochRecord {
            epoch: 0,
            train_loss: 0.5,
            val_loss: 0.25,
            lr: 1e-4,
        }];
        assert_eq!(history_csv(&h), "epoch,train_loss,val_loss,lr\n0,0.5,0.25,0.0001\n");
    }
}
