use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{gaussian, join, Linear, Param, Parameters};
use crate::error::{shape_err, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Frozen projection plus a low-rank update: `y = x Wᵀ + b + (α/r)·(x Aᵀ) Bᵀ`.
///
/// `A` is `[r × d_in]`, `B` is `[d_out × r]`. `B` starts at zero so a fresh
/// layer reproduces the base projection exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct LoraLinear<T> {
    pub base: Linear<T>,
    pub a: Param<T>,
    pub b: Param<T>,
    pub alpha: T,
    pub enabled: bool,
}

#[derive(Debug, Clone)]
pub struct LoraCache<T> {
    input: Matrix<T>,
    /// `x Aᵀ`, present when the low-rank branch ran.
    low: Option<Matrix<T>>,
}

impl<T: Scalar> LoraLinear<T> {
    pub fn new(base: Linear<T>, a: Matrix<T>, b: Matrix<T>, alpha: T) -> Result<Self> {
        let r = a.rows();
        if a.cols() != base.d_in() || b.rows() != base.d_out() || b.cols() != r {
            return Err(shape_err!(
                "lora factors A {:?}, B {:?} for base {}x{}",
                a.shape(),
                b.shape(),
                base.d_out(),
                base.d_in()
            ));
        }
        Ok(Self {
            base,
            a: Param::trainable(a),
            b: Param::trainable(b),
            alpha,
            enabled: true,
        })
    }

    /// Gaussian `A` with standard deviation `1/√d_in`, zero `B`.
    pub fn wrap<R: Rng>(rng: &mut R, base: Linear<T>, rank: usize, alpha: f64) -> Self {
        let a = gaussian(rng, rank, base.d_in(), 1.0 / (base.d_in() as f64).sqrt());
        let b = Matrix::zeros(base.d_out(), rank);
        Self::new(base, a, b, T::of(alpha)).expect("shapes built to match")
    }

    pub fn rank(&self) -> usize {
        self.a.value.rows()
    }

    /// `α / r`, zero for rank 0.
    pub fn scaling(&self) -> T {
        if self.rank() == 0 {
            T::zero()
        } else {
            self.alpha / T::of(self.rank() as f64)
        }
    }

    fn branch_active(&self) -> bool {
        self.enabled && self.rank() > 0
    }

    /// Enables the branch and makes both factors trainable, or disables it
    /// and freezes them.
    pub fn set_enabled(&mut self, on: bool) {
        self.enabled = on;
        self.a.trainable = on;
        self.b.trainable = on;
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<(Matrix<T>, LoraCache<T>)> {
        let mut y = self.base.forward(x)?;
        let low = if self.branch_active() {
            let low = x.matmul_t(&self.a.value)?;
            let delta = low.matmul_t(&self.b.value)?;
            y.axpy(self.scaling(), &delta)?;
            Some(low)
        } else {
            None
        };
        Ok((
            y,
            LoraCache {
                input: x.clone(),
                low,
            },
        ))
    }

    pub fn backward(&mut self, cache: &LoraCache<T>, grad: &Matrix<T>) -> Result<Matrix<T>> {
        let mut dx = self.base.backward(&cache.input, grad)?;
        if let Some(low) = &cache.low {
            let s = self.scaling();
            let g_low = grad.matmul(&self.b.value)?;
            if self.b.trainable {
                self.b.accumulate(&grad.t_matmul(low)?.scale(s));
            }
            if self.a.trainable {
                self.a.accumulate(&g_low.t_matmul(&cache.input)?.scale(s));
            }
            dx.axpy(s, &g_low.matmul(&self.a.value)?)?;
        }
        Ok(dx)
    }

    /// Base weight with the low-rank update folded in: `W + (α/r)·B A`.
    pub fn merged_weight(&self) -> Result<Matrix<T>> {
        let mut w = self.base.weight.value.clone();
        if self.branch_active() {
            w.axpy(self.scaling(), &self.b.value.matmul(&self.a.value)?)?;
        }
        Ok(w)
    }

    /// A plain projection equal to this layer's forward map.
    pub fn merged(&self) -> Result<Linear<T>> {
        Ok(Linear {
            weight: Param::frozen(self.merged_weight()?),
            bias: self.base.bias.as_ref().map(|b| Param::frozen(b.value.clone())),
        })
    }
}

impl<T: Scalar> Parameters<T> for LoraLinear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.base.visit(&join(prefix, "base"), f);
        f(&join(prefix, "lora_a"), &self.a);
        f(&join(prefix, "lora_b"), &self.b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.base.visit_mut(&join(prefix, "base"), f);
        f(&join(prefix, "lora_a"), &mut self.a);
        f(&join(prefix, "lora_b"), &mut self.b);
    }
}
