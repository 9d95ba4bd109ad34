use rand::Rng;
use serde::{Deserialize, Serialize};

use super::adapter::AdapterCache;
use super::attention::AttentionCache;
use super::layers::{FeedForwardCache, LayerNormCache};
use super::{join, Adapter, FeedForward, LayerNorm, MultiHeadAttention, Param, Parameters};
use crate::error::{shape_err, Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub lora_rank: usize,
    pub lora_alpha: u32,
    pub adapter_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            d_model: 128,
            d_ffn: 256,
            lora_rank: 8,
            lora_alpha: 16,
            adapter_dim: 16,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.d_ffn == 0 || self.adapter_dim == 0 {
            return Err(Error::Config("d_ffn and adapter_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Which parts of the backbone adapt during fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TrainPolicy {
    /// Unfreeze the Q/K/V base projections themselves.
    pub train_qkv_base: bool,
    pub enable_lora: bool,
    pub enable_adapter: bool,
}

impl Default for TrainPolicy {
    fn default() -> Self {
        Self {
            train_qkv_base: false,
            enable_lora: true,
            enable_adapter: true,
        }
    }
}

impl TrainPolicy {
    /// Everything frozen, no adaptation branches.
    pub fn frozen() -> Self {
        Self {
            train_qkv_base: false,
            enable_lora: false,
            enable_adapter: false,
        }
    }
}

/// Pre-norm block: `x + Attn(LN(x))`, then `+ Adapter(FFN(LN(·)))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct EncoderLayer<T> {
    pub ln_attn: LayerNorm<T>,
    pub attn: MultiHeadAttention<T>,
    pub ln_ffn: LayerNorm<T>,
    pub ffn: FeedForward<T>,
    pub adapter: Adapter<T>,
}

#[derive(Debug, Clone)]
struct LayerCache<T> {
    ln_attn: LayerNormCache<T>,
    attn: AttentionCache<T>,
    ln_ffn: LayerNormCache<T>,
    ffn: FeedForwardCache<T>,
    adapter: Option<AdapterCache<T>>,
}

impl<T: Scalar> EncoderLayer<T> {
    fn forward(&self, x: &Matrix<T>, mask: &[bool]) -> Result<(Matrix<T>, LayerCache<T>)> {
        let (a, ln_attn) = self.ln_attn.forward(x)?;
        let (att, attn) = self.attn.forward(&a, mask)?;
        let x1 = x.add(&att)?;
        let (b, ln_ffn) = self.ln_ffn.forward(&x1)?;
        let (f, ffn) = self.ffn.forward(&b)?;
        let (ad, adapter) = self.adapter.forward(&f)?;
        let x2 = x1.add(&ad)?;
        Ok((
            x2,
            LayerCache {
                ln_attn,
                attn,
                ln_ffn,
                ffn,
                adapter,
            },
        ))
    }

    fn backward(&mut self, cache: &LayerCache<T>, grad: &Matrix<T>) -> Result<Matrix<T>> {
        let df = self.adapter.backward(cache.adapter.as_ref(), grad)?;
        let db = self.ffn.backward(&cache.ffn, &df)?;
        let mut dx1 = self.ln_ffn.backward(&cache.ln_ffn, &db)?;
        dx1.add_assign(grad)?;
        let da = self.attn.backward(&cache.attn, &dx1)?;
        let mut dx = self.ln_attn.backward(&cache.ln_attn, &da)?;
        dx.add_assign(&dx1)?;
        Ok(dx)
    }

    fn apply_policy(&mut self, policy: &TrainPolicy) {
        for proj in [&mut self.attn.query, &mut self.attn.key, &mut self.attn.value] {
            proj.set_enabled(policy.enable_lora);
            proj.base.set_trainable(policy.train_qkv_base);
        }
        self.adapter.set_enabled(policy.enable_adapter);
    }
}

impl<T: Scalar> Parameters<T> for EncoderLayer<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.ln_attn.visit(&join(prefix, "ln_attn"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.ln_ffn.visit(&join(prefix, "ln_ffn"), f);
        self.ffn.visit(&join(prefix, "ffn"), f);
        self.adapter.visit(&join(prefix, "adapter"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.ln_attn.visit_mut(&join(prefix, "ln_attn"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.ln_ffn.visit_mut(&join(prefix, "ln_ffn"), f);
        self.ffn.visit_mut(&join(prefix, "ffn"), f);
        self.adapter.visit_mut(&join(prefix, "adapter"), f);
    }
}

/// Stack of [`EncoderLayer`]s.
///
/// [`Encoder::forward_recorded`] keeps the activations needed by
/// [`Encoder::backward`]; each recording serves exactly one backward call.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Encoder<T> {
    pub config: EncoderConfig,
    pub policy: TrainPolicy,
    pub layers: Vec<EncoderLayer<T>>,
    #[serde(skip)]
    recording: Option<Vec<LayerCache<T>>>,
}

impl<T: Scalar> PartialEq for Encoder<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.policy == other.policy && self.layers == other.layers
    }
}

impl<T: Scalar> Encoder<T> {
    /// Frozen weights come from `backbone`, adapter factors from `adapt`.
    pub fn init<R: Rng>(
        config: EncoderConfig,
        policy: TrainPolicy,
        backbone: &mut R,
        adapt: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let layers = (0..config.layers)
            .map(|_| EncoderLayer {
                ln_attn: LayerNorm::random(backbone, config.d_model),
                attn: MultiHeadAttention::random(
                    backbone,
                    adapt,
                    config.d_model,
                    config.heads,
                    config.lora_rank,
                    f64::from(config.lora_alpha),
                ),
                ln_ffn: LayerNorm::random(backbone, config.d_model),
                ffn: FeedForward::random(backbone, config.d_model, config.d_ffn),
                adapter: Adapter::init(adapt, config.d_model, config.adapter_dim),
            })
            .collect();
        let mut enc = Self {
            config,
            policy,
            layers,
            recording: None,
        };
        enc.set_policy(policy);
        Ok(enc)
    }

    pub fn set_policy(&mut self, policy: TrainPolicy) {
        self.policy = policy;
        for layer in &mut self.layers {
            layer.apply_policy(&policy);
        }
    }

    /// Freezes every parameter regardless of policy.
    pub fn freeze_all(&mut self) {
        self.visit_mut("", &mut |_, p| p.trainable = false);
    }

    pub fn forward(&self, x: &Matrix<T>, mask: &[bool]) -> Result<Matrix<T>> {
        self.check_input(x, mask)?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h, mask)?.0;
        }
        Ok(h)
    }

    pub fn forward_recorded(&mut self, x: &Matrix<T>, mask: &[bool]) -> Result<Matrix<T>> {
        self.check_input(x, mask)?;
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, cache) = layer.forward(&h, mask)?;
            caches.push(cache);
            h = next;
        }
        self.recording = Some(caches);
        Ok(h)
    }

    /// Backpropagates `grad` through the last recorded forward pass and
    /// returns the input gradient.
    pub fn backward(&mut self, grad: &Matrix<T>) -> Result<Matrix<T>> {
        let caches = self
            .recording
            .take()
            .ok_or_else(|| Error::State("backward called without a recorded forward pass".into()))?;
        let mut g = grad.clone();
        for (layer, cache) in self.layers.iter_mut().zip(&caches).rev() {
            g = layer.backward(cache, &g)?;
        }
        Ok(g)
    }

    pub fn has_recording(&self) -> bool {
        self.recording.is_some()
    }

    /// Copy with LoRA updates folded into the Q/K/V weights.
    pub fn merged(&self) -> Result<Self> {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                Ok(EncoderLayer {
                    attn: l.attn.merged()?,
                    ..l.clone()
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            recording: None,
            ..self.clone()
        })
    }

    fn check_input(&self, x: &Matrix<T>, mask: &[bool]) -> Result<()> {
        if x.cols() != self.config.d_model || mask.len() != x.rows() {
            return Err(shape_err!(
                "encoder input {:?} with mask of {} for d_model {}",
                x.shape(),
                mask.len(),
                self.config.d_model
            ));
        }
        Ok(())
    }
}

impl<T: Scalar> Parameters<T> for Encoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layers.{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layers.{i}")), f);
        }
    }
}

/// `PE[p, 2i] = sin(p / 10000^(2i/d))`, `PE[p, 2i+1] = cos(·)`.
pub fn sinusoidal_positions<T: Scalar>(len: usize, d: usize) -> Matrix<T> {
    Matrix::from_fn(len, d, |p, j| {
        let i = (j / 2) as f64;
        let angle = p as f64 / 10_000f64.powf(2.0 * i / d as f64);
        T::of(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// Mean over the rows whose mask entry is true, or over all rows when none is.
pub fn masked_mean_pool<T: Scalar>(x: &Matrix<T>, mask: &[bool]) -> Vec<T> {
    if !mask.iter().any(|&m| m) {
        return x.mean_rows();
    }
    let mut out = vec![T::zero(); x.cols()];
    let mut n = 0usize;
    for (i, &ok) in mask.iter().enumerate() {
        if ok {
            n += 1;
            for (o, &v) in out.iter_mut().zip(x.row(i)) {
                *o += v;
            }
        }
    }
    let n = T::of(n.max(1) as f64);
    out.into_iter().map(|v| v / n).collect()
}
