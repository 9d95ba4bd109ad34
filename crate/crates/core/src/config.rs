//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is
//! optional; unknown or repeated keys are errors. Lists are comma separated.
//!
//! | key | default |
//! |---|---|
//! | `curves_dir`, `catalog`, `out_dir`, `dataset_dir` | `data/curves`, `data/catalog.csv`, `out`, `<out_dir>/dataset` |
//! | `patch_len`, `stride`, `pred_len`, `token_len` | 512, 48, 480, 64 |
//! | `lr`, `weight_decay`, `max_epochs`, `patience`, `batch_size`, `seed` | 1e-4, 0.01, 200, 10, 32, 0 |
//! | `use_fhrs`, `use_fsin`, `use_lora`, `use_adapter`, `train_qkv_base` | true, true, true, true, false |
//! | `split` | `0.7,0.15,0.15` |
//! | `layers`, `heads`, `d_model`, `d_ffn`, `lora_rank`, `lora_alpha`, `adapter_dim`, `head_hidden`, `backbone_seed` | 2, 4, 128, 256, 8, 16, 16, 64, 2957946958 |
//! | `text_vocab`, `text_max_len`, `text_layers`, `text_heads`, `text_d_model`, `text_d_ffn`, `text_seed` | 4096, 64, 2, 4, 128, 256, 1592622663 |
//! | `sweep_patch_lens`, `sweep_strides`, `sweep_pred_lens` | `256,512`, `48,96`, `96,192,288,384,480` |
//! | `synth_stars`, `synth_quarters`, `synth_curve_len`, `synth_active_fraction`, `synth_missing_rate` | 200, 1, 1088, 0.4, 0.003 |
//! | `plot_heatmap`, `plot_imbalance` | true, true |
//! | `precision` | `f64` (`f32` also accepted) |
//!
//! The synthetic generator draws from `seed` as well.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synth::SynthConfig;
use crate::text_encoder::TextEncoderConfig;
use crate::trainer::TrainConfig;
use crate::windowing::{grid, PatchConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub patch_lens: Vec<usize>,
    pub strides: Vec<usize>,
    pub pred_lens: Vec<usize>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            patch_lens: vec![256, 512],
            strides: vec![48, 96],
            pred_lens: vec![96, 192, 288, 384, 480],
        }
    }
}

impl SweepGrid {
    pub fn configs(&self, token_len: usize) -> Vec<PatchConfig> {
        grid(&self.patch_lens, &self.strides, &self.pred_lens, token_len)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub curves_dir: PathBuf,
    pub catalog: PathBuf,
    pub out_dir: PathBuf,
    pub dataset_dir: Option<PathBuf>,
    pub patch: PatchConfig,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub text: TextEncoderConfig,
    pub sweep: SweepGrid,
    pub synth: SynthConfig,
    pub plot_heatmap: bool,
    pub plot_imbalance: bool,
    pub precision: Precision,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            curves_dir: "data/curves".into(),
            catalog: "data/catalog.csv".into(),
            out_dir: "out".into(),
            dataset_dir: None,
            patch: PatchConfig::default(),
            train: TrainConfig::default(),
            model: ModelConfig::default(),
            text: TextEncoderConfig::default(),
            sweep: SweepGrid::default(),
            synth: SynthConfig::default(),
            plot_heatmap: true,
            plot_imbalance: true,
            precision: Precision::F64,
        }
    }
}

fn value<V: FromStr>(key: &str, raw: &str) -> Result<V> {
    raw.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{raw}`")))
}

fn list<V: FromStr>(key: &str, raw: &str) -> Result<Vec<V>> {
    raw.split(',').map(|p| value(key, p.trim())).collect()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, raw) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (key, raw) = (key.trim(), raw.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: `{key}` given twice", n + 1)));
            }
            cfg.set(key, raw)
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, e.to_string().trim_start_matches("config error: "))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Assigns one key.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        match key {
            "curves_dir" => self.curves_dir = raw.into(),
            "catalog" => self.catalog = raw.into(),
            "out_dir" => self.out_dir = raw.into(),
            "dataset_dir" => self.dataset_dir = Some(raw.into()),
            "patch_len" => self.patch.patch_len = value(key, raw)?,
            "stride" => self.patch.stride = value(key, raw)?,
            "pred_len" => self.patch.pred_len = value(key, raw)?,
            "token_len" => self.patch.token_len = value(key, raw)?,
            "lr" => self.train.lr = value(key, raw)?,
            "weight_decay" => self.train.weight_decay = value(key, raw)?,
            "max_epochs" => self.train.max_epochs = value(key, raw)?,
            "patience" => self.train.patience = value(key, raw)?,
            "batch_size" => self.train.batch_size = value(key, raw)?,
            "seed" => self.train.seed = value(key, raw)?,
            "use_fhrs" => self.train.use_fhrs = value(key, raw)?,
            "use_fsin" => self.train.use_fsin = value(key, raw)?,
            "use_lora" => self.train.use_lora = value(key, raw)?,
            "use_adapter" => self.train.use_adapter = value(key, raw)?,
            "train_qkv_base" => self.train.train_qkv_base = value(key, raw)?,
            "split" => {
                let v: Vec<f64> = list(key, raw)?;
                self.train.split = v
                    .try_into()
                    .map_err(|_| Error::Config("`split` needs three fractions".into()))?;
            }
            "layers" => self.model.encoder.layers = value(key, raw)?,
            "heads" => self.model.encoder.heads = value(key, raw)?,
            "d_model" => self.model.encoder.d_model = value(key, raw)?,
            "d_ffn" => self.model.encoder.d_ffn = value(key, raw)?,
            "lora_rank" => self.model.encoder.lora_rank = value(key, raw)?,
            "lora_alpha" => self.model.encoder.lora_alpha = value(key, raw)?,
            "adapter_dim" => self.model.encoder.adapter_dim = value(key, raw)?,
            "head_hidden" => self.model.head_hidden = value(key, raw)?,
            "backbone_seed" => self.model.backbone_seed = value(key, raw)?,
            "text_vocab" => self.text.vocab.size = value(key, raw)?,
            "text_max_len" => self.text.vocab.max_len = value(key, raw)?,
            "text_layers" => self.text.encoder.layers = value(key, raw)?,
            "text_heads" => self.text.encoder.heads = value(key, raw)?,
            "text_d_model" => self.text.encoder.d_model = value(key, raw)?,
            "text_d_ffn" => self.text.encoder.d_ffn = value(key, raw)?,
            "text_seed" => self.text.seed = value(key, raw)?,
            "sweep_patch_lens" => self.sweep.patch_lens = list(key, raw)?,
            "sweep_strides" => self.sweep.strides = list(key, raw)?,
            "sweep_pred_lens" => self.sweep.pred_lens = list(key, raw)?,
            "synth_stars" => self.synth.stars = value(key, raw)?,
            "synth_quarters" => self.synth.quarters = value(key, raw)?,
            "synth_curve_len" => self.synth.curve_len = value(key, raw)?,
            "synth_active_fraction" => self.synth.active_fraction = value(key, raw)?,
            "synth_missing_rate" => self.synth.missing_rate = value(key, raw)?,
            "plot_heatmap" => self.plot_heatmap = value(key, raw)?,
            "plot_imbalance" => self.plot_imbalance = value(key, raw)?,
            "precision" => {
                self.precision = match raw {
                    "f64" => Precision::F64,
                    "f32" => Precision::F32,
                    _ => return Err(Error::Config(format!("`precision` must be f32 or f64, got `{raw}`"))),
                }
            }
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Cross-field checks; also keeps the model's token geometry in step
    /// with the window configuration.
    pub fn validate(&mut self) -> Result<()> {
        self.patch.validate()?;
        self.model.tokens = self.patch.tokens();
        self.model.token_len = self.patch.token_len;
        self.model.validate()?;
        self.train.validate()?;
        self.text.vocab.validate()?;
        self.text.encoder.validate()?;
        self.synth.seed = self.train.seed;
        self.synth.validate()?;
        if self.text.encoder.d_model < self.patch.token_len {
            return Err(Error::Config(format!(
                "text_d_model {} must be at least token_len {} for the PCA reduction",
                self.text.encoder.d_model, self.patch.token_len
            )));
        }
        let g = &self.sweep;
        if g.patch_lens.is_empty() || g.strides.is_empty() || g.pred_lens.is_empty() {
            return Err(Error::Config("sweep grid lists must be non-empty".into()));
        }
        for c in self.sweep.configs(self.patch.token_len) {
            c.validate_geometry()?;
        }
        Ok(())
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.dataset_dir.clone().unwrap_or_else(|| self.out_dir.join("dataset"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let mut d = RunConfig::default();
        d.validate().unwrap();
        assert_eq!(RunConfig::parse("").unwrap(), d);
    }

    #[test]
    fn keys_and_comments() {
        let c = RunConfig::parse("# run\npatch_len = 256\n\nsplit = 0.8, 0.1, 0.1\nuse_lora=false\n").unwrap();
        assert_eq!(c.patch.patch_len, 256);
        assert_eq!(c.model.tokens, 4);
        assert_eq!(c.train.split, [0.8, 0.1, 0.1]);
        assert!(!c.train.use_lora);
    }

    #[test]
    fn rejects_bad_input() {
        for bad in [
            "colour = blue",
            "patch_len = 512\npatch_len = 256",
            "stride = -3",
            "token_len = 48",
            "split = 0.5,0.5",
            "sweep_pred_lens =",
            "just words",
            "precision = f16",
        ] {
            let err = RunConfig::parse(bad).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{bad}: {err:?}");
        }
    }
}
