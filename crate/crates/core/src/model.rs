//! The flare classifier: per-token input projection, positional encodings,
//! the adapted encoder, mean pooling and a two-layer MLP head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::fusion::FusedInput;
use crate::linalg::Matrix;
use crate::peft::{
    gaussian, gelu, gelu_grad, join, sinusoidal_positions, Encoder, EncoderConfig, Linear, Param,
    Parameters, TrainPolicy,
};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Tokens per window.
    pub tokens: usize,
    /// Points per token; each token row carries two channels of this length.
    pub token_len: usize,
    pub head_hidden: usize,
    /// Seeds the frozen backbone weights.
    pub backbone_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            tokens: 8,
            token_len: 64,
            head_hidden: 64,
            backbone_seed: 0xB0_4EB0_4E,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.tokens == 0 || self.token_len == 0 || self.head_hidden == 0 {
            return Err(Error::Config(format!(
                "tokens, token_len and head_hidden must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Trainable versus total parameter counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamAudit {
    pub trainable: usize,
    pub total: usize,
    pub fraction: f64,
}

impl ParamAudit {
    pub fn new(trainable: usize, total: usize) -> Self {
        Self {
            trainable,
            total,
            fraction: if total == 0 { 0.0 } else { trainable as f64 / total as f64 },
        }
    }

    /// Adds frozen parameters that live outside the model (the text encoder).
    pub fn with_frozen(&self, extra: usize) -> Self {
        Self::new(self.trainable, self.total + extra)
    }
}

/// Activations kept for one backward pass.
#[derive(Debug, Clone)]
struct Trace<T> {
    rows: Matrix<T>,
    pooled: Matrix<T>,
    hidden_pre: Matrix<T>,
    hidden: Matrix<T>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Classifier<T> {
    pub config: ModelConfig,
    pub input: Linear<T>,
    pub encoder: Encoder<T>,
    pub head_hidden: Linear<T>,
    pub head_out: Linear<T>,
}

impl<T: Scalar> PartialEq for Classifier<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.input == other.input
            && self.encoder == other.encoder
            && self.head_hidden == other.head_hidden
            && self.head_out == other.head_out
    }
}

fn trainable_linear<T: Scalar, R: Rng>(rng: &mut R, d_in: usize, d_out: usize) -> Linear<T> {
    let mut lin = Linear {
        weight: Param::trainable(gaussian(rng, d_out, d_in, 1.0 / (d_in as f64).sqrt())),
        bias: Some(Param::trainable(Matrix::zeros(1, d_out))),
    };
    lin.set_trainable(true);
    lin
}

impl<T: Scalar> Classifier<T> {
    /// Backbone from `config.backbone_seed`; adaptation factors, projection and
    /// head from `seed`.
    pub fn new(config: ModelConfig, policy: TrainPolicy, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut backbone = ChaCha8Rng::seed_from_u64(config.backbone_seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::init(config.encoder, policy, &mut backbone, &mut rng)?;
        let d = config.encoder.d_model;
        Ok(Self {
            config,
            input: trainable_linear(&mut rng, 2 * config.token_len, d),
            encoder,
            head_hidden: trainable_linear(&mut rng, d, config.head_hidden),
            head_out: trainable_linear(&mut rng, config.head_hidden, 2),
        })
    }

    pub fn set_policy(&mut self, policy: TrainPolicy) {
        self.encoder.set_policy(policy);
    }

    pub fn audit(&self) -> ParamAudit {
        let (t, n) = self.param_counts();
        ParamAudit::new(t, n)
    }

    fn check(&self, x: &FusedInput<T>) -> Result<()> {
        if x.tokens != self.config.tokens || x.token_len != self.config.token_len {
            return Err(shape_err!(
                "input of {} tokens × {} for a model of {} × {}",
                x.tokens,
                x.token_len,
                self.config.tokens,
                self.config.token_len
            ));
        }
        Ok(())
    }

    fn embed(&self, x: &FusedInput<T>) -> Result<(Matrix<T>, Matrix<T>)> {
        self.check(x)?;
        let rows = x.token_rows();
        let mut h = self.input.forward(&rows)?;
        h.add_assign(&sinusoidal_positions(self.config.tokens, self.config.encoder.d_model))?;
        Ok((rows, h))
    }

    fn head(&self, encoded: &Matrix<T>) -> Result<([T; 2], Trace<T>)> {
        let pooled = Matrix::from_vec(1, encoded.cols(), encoded.mean_rows())?;
        let hidden_pre = self.head_hidden.forward(&pooled)?;
        let hidden = hidden_pre.map(gelu);
        let z = self.head_out.forward(&hidden)?;
        let logits = [z[(0, 0)], z[(0, 1)]];
        let trace = Trace {
            rows: Matrix::zeros(0, 0),
            pooled,
            hidden_pre,
            hidden,
        };
        Ok((logits, trace))
    }

    pub fn logits(&self, x: &FusedInput<T>) -> Result<[T; 2]> {
        let (_, h) = self.embed(x)?;
        let mask = vec![true; h.rows()];
        let encoded = self.encoder.forward(&h, &mask)?;
        Ok(self.head(&encoded)?.0)
    }

    /// `[p(no flare), p(flare)]`.
    pub fn probabilities(&self, x: &FusedInput<T>) -> Result<[T; 2]> {
        Ok(softmax2(self.logits(x)?))
    }

    /// Cross-entropy of one sample. Accumulates `scale · ∂loss/∂θ` into the
    /// trainable parameters and returns the unscaled loss.
    pub fn accumulate_loss(&mut self, x: &FusedInput<T>, label: bool, scale: T) -> Result<T> {
        let (rows, h) = self.embed(x)?;
        let mask = vec![true; h.rows()];
        let encoded = self.encoder.forward_recorded(&h, &mask)?;
        let (logits, mut trace) = self.head(&encoded)?;
        trace.rows = rows;
        let (loss, dz) = cross_entropy(logits, label);
        if !loss.is_finite() {
            // drop the recording so the next call starts clean
            self.encoder.backward(&Matrix::zeros(encoded.rows(), encoded.cols()))?;
            return Err(Error::Numerical(format!("non-finite loss from logits {logits:?}")));
        }
        let dz = Matrix::from_vec(1, 2, vec![dz[0] * scale, dz[1] * scale])?;
        self.backward(&trace, encoded.rows(), &dz)?;
        Ok(loss)
    }

    fn backward(&mut self, trace: &Trace<T>, tokens: usize, dz: &Matrix<T>) -> Result<()> {
        let dhidden = self.head_out.backward(&trace.hidden, dz)?;
        let mut dpre = dhidden;
        for (g, &u) in dpre.as_mut_slice().iter_mut().zip(trace.hidden_pre.as_slice()) {
            *g *= gelu_grad(u);
        }
        let dpooled = self.head_hidden.backward(&trace.pooled, &dpre)?;
        let inv = T::one() / T::of(tokens as f64);
        let dencoded = Matrix::from_fn(tokens, dpooled.cols(), |_, c| dpooled[(0, c)] * inv);
        let dh = self.encoder.backward(&dencoded)?;
        self.input.backward(&trace.rows, &dh)?;
        Ok(())
    }
}

impl<T: Scalar> Parameters<T> for Classifier<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.input.visit(&join(prefix, "input"), f);
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.head_hidden.visit(&join(prefix, "head.hidden"), f);
        self.head_out.visit(&join(prefix, "head.out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.input.visit_mut(&join(prefix, "input"), f);
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.head_hidden.visit_mut(&join(prefix, "head.hidden"), f);
        self.head_out.visit_mut(&join(prefix, "head.out"), f);
    }
}

pub fn softmax2<T: Scalar>(z: [T; 2]) -> [T; 2] {
    let m = z[0].max(z[1]);
    let (a, b) = ((z[0] - m).exp(), (z[1] - m).exp());
    let s = a + b;
    [a / s, b / s]
}

/// Loss and `∂loss/∂logits` for a two-class softmax.
pub fn cross_entropy<T: Scalar>(z: [T; 2], label: bool) -> (T, [T; 2]) {
    let m = z[0].max(z[1]);
    let lse = m + ((z[0] - m).exp() + (z[1] - m).exp()).ln();
    let y = usize::from(label);
    let p = softmax2(z);
    let mut d = p;
    d[y] -= T::one();
    (lse - z[y], d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::fuse_vectors;

    fn tiny() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                layers: 1,
                heads: 2,
                d_model: 8,
                d_ffn: 12,
                lora_rank: 2,
                lora_alpha: 4,
                adapter_dim: 3,
            },
            tokens: 3,
            token_len: 4,
            head_hidden: 5,
            backbone_seed: 11,
        }
    }

    fn input(seed: u64) -> FusedInput<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let light = gaussian(&mut rng, 3, 4, 1.0);
        let s: Vec<f64> = gaussian(&mut rng, 1, 4, 1.0).as_slice().to_vec();
        let h: Vec<f64> = gaussian(&mut rng, 1, 4, 1.0).as_slice().to_vec();
        fuse_vectors(&light, Some(&s), Some(&h)).unwrap()
    }

    #[test]
    fn probabilities_sum_to_one() {
        let m = Classifier::<f64>::new(tiny(), TrainPolicy::default(), 3).unwrap();
        for s in 0..5 {
            let p = m.probabilities(&input(s)).unwrap();
            assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&p[1]));
        }
    }

    #[test]
    fn fresh_flags_do_not_change_output() {
        let on = Classifier::<f64>::new(tiny(), TrainPolicy::default(), 3).unwrap();
        let off = Classifier::<f64>::new(tiny(), TrainPolicy::frozen(), 3).unwrap();
        let x = input(9);
        assert_eq!(on.logits(&x).unwrap(), off.logits(&x).unwrap());
    }

    #[test]
    fn frozen_policy_trains_projection_and_head_only() {
        let m = Classifier::<f64>::new(tiny(), TrainPolicy::frozen(), 3).unwrap();
        let mut names = Vec::new();
        m.visit("", &mut |n, p| {
            if p.trainable {
                names.push(n.to_string());
            }
        });
        assert!(names.iter().all(|n| n.starts_with("input") || n.starts_with("head")));
        let c = tiny();
        let expect = (2 * c.token_len + 1) * c.encoder.d_model
            + (c.encoder.d_model + 1) * c.head_hidden
            + (c.head_hidden + 1) * 2;
        assert_eq!(m.audit().trainable, expect);
    }

    #[test]
    fn default_model_is_parameter_efficient() {
        let m = Classifier::<f32>::new(ModelConfig::default(), TrainPolicy::default(), 1).unwrap();
        assert!(m.audit().fraction < 0.15, "{:?}", m.audit());
    }

    #[test]
    fn cross_entropy_matches_log_softmax() {
        let (l, d) = cross_entropy([0.3f64, -1.2], true);
        let p1 = (-1.2f64).exp() / (0.3f64.exp() + (-1.2f64).exp());
        assert!((l + p1.ln()).abs() < 1e-14);
        assert!((d[1] - (p1 - 1.0)).abs() < 1e-14);
        assert!((d[0] + d[1]).abs() < 1e-14);
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let m = Classifier::<f64>::new(tiny(), TrainPolicy::default(), 3).unwrap();
        let light = Matrix::zeros(2, 4);
        let x = fuse_vectors(&light, None, None).unwrap();
        assert!(m.logits(&x).is_err());
    }
}
