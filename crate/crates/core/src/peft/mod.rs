//! Transformer encoder with low-rank adapters in attention and bottleneck
//! adapters after the feed-forward block, with hand-derived backward passes
//! and AdamW.
//!
//! Parameters carry their own gradient slot. Backward passes accumulate into
//! the slots of trainable parameters only; frozen parameters never receive a
//! gradient.

mod adapter;
mod attention;
mod encoder;
mod layers;
mod lora;
mod optim;

pub use adapter::{Adapter, AdapterCache};
pub use attention::{AttentionCache, MultiHeadAttention};
pub use encoder::{masked_mean_pool, sinusoidal_positions, Encoder, EncoderConfig, EncoderLayer, TrainPolicy};
pub use layers::{gelu, gelu_grad, FeedForward, LayerNorm, Linear};
pub use lora::{LoraCache, LoraLinear};
pub use optim::{AdamW, AdamWConfig, Moments};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::linalg::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Param<T> {
    pub value: Matrix<T>,
    pub trainable: bool,
    #[serde(skip)]
    pub grad: Option<Matrix<T>>,
}

impl<T: Scalar> Param<T> {
    pub fn frozen(value: Matrix<T>) -> Self {
        Self {
            value,
            trainable: false,
            grad: None,
        }
    }

    pub fn trainable(value: Matrix<T>) -> Self {
        Self {
            value,
            trainable: true,
            grad: None,
        }
    }

    /// Adds `g` to the gradient slot. No-op for frozen parameters.
    pub fn accumulate(&mut self, g: &Matrix<T>) {
        if !self.trainable {
            return;
        }
        debug_assert_eq!(g.shape(), self.value.shape());
        match &mut self.grad {
            Some(acc) => acc.add_assign(g).expect("gradient shape"),
            None => self.grad = Some(g.clone()),
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Anything that owns named parameters.
pub trait Parameters<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.grad = None);
    }

    /// `(trainable, total)` scalar counts.
    fn param_counts(&self) -> (usize, usize) {
        let (mut trainable, mut total) = (0, 0);
        self.visit("", &mut |_, p| {
            total += p.len();
            if p.trainable {
                trainable += p.len();
            }
        });
        (trainable, total)
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit("", &mut |n, _| names.push(n.to_string()));
        names
    }

    /// Hex SHA-256 over the names and values of every frozen parameter.
    fn frozen_digest(&self) -> String {
        let mut h = Sha256::new();
        self.visit("", &mut |name, p| {
            if !p.trainable {
                h.update(name.as_bytes());
                for x in p.value.as_slice() {
                    h.update(x.to_f64_lossy().to_bits().to_le_bytes());
                }
            }
        });
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Snapshot of the trainable values, in visit order.
    fn trainable_values(&self) -> Vec<Matrix<T>> {
        let mut out = Vec::new();
        self.visit("", &mut |_, p| {
            if p.trainable {
                out.push(p.value.clone());
            }
        });
        out
    }

    fn restore_trainable(&mut self, values: &[Matrix<T>]) {
        let mut it = values.iter();
        self.visit_mut("", &mut |_, p| {
            if p.trainable {
                p.value = it.next().expect("snapshot length").clone();
            }
        });
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn gaussian<T: Scalar, R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = rng.sample(StandardNormal);
        T::of(z * std)
    })
}
