use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Parameters;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Moments<T> {
    pub first: Matrix<T>,
    pub second: Matrix<T>,
}

/// Adam with decoupled weight decay and bias-corrected moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    /// Keyed by parameter name.
    pub moments: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Applies one update to every trainable parameter of `model` from its
    /// accumulated gradient (missing gradients count as zero). Non-finite
    /// gradients abort before anything is modified.
    pub fn step<M: Parameters<T> + ?Sized>(&mut self, model: &mut M) -> Result<()> {
        let mut bad = None;
        model.visit("", &mut |name, p| {
            if bad.is_none() && p.trainable {
                if let Some(g) = &p.grad {
                    if !g.all_finite() {
                        bad = Some(name.to_string());
                    }
                }
            }
        });
        if let Some(name) = bad {
            return Err(Error::Numerical(format!("non-finite gradient for {name}")));
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let corr1 = T::of(1.0 - c.beta1.powi(t));
        let corr2 = T::of(1.0 - c.beta2.powi(t));
        let (lr, eps) = (T::of(c.lr), T::of(c.eps));
        let decay = T::one() - T::of(c.lr * c.weight_decay);
        let moments = &mut self.moments;
        model.visit_mut("", &mut |name, p| {
            if !p.trainable {
                return;
            }
            let (rows, cols) = p.value.shape();
            let state = moments.entry(name.to_string()).or_insert_with(|| Moments {
                first: Matrix::zeros(rows, cols),
                second: Matrix::zeros(rows, cols),
            });
            let grad = p.grad.as_ref().map(Matrix::as_slice);
            let (m, v) = (state.first.as_mut_slice(), state.second.as_mut_slice());
            for (i, theta) in p.value.as_mut_slice().iter_mut().enumerate() {
                let g = grad.map_or(T::zero(), |g| g[i]);
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let m_hat = m[i] / corr1;
                let v_hat = v[i] / corr2;
                *theta = *theta * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::peft::{Linear, Param};

    fn scalar_model(theta: f64, grad: Option<f64>) -> Linear<f64> {
        let mut lin = Linear::new(Matrix::from_vec(1, 1, vec![theta]).unwrap(), None);
        lin.set_trainable(true);
        lin.weight.grad = grad.map(|g| Matrix::from_vec(1, 1, vec![g]).unwrap());
        lin
    }

    fn value(lin: &Linear<f64>) -> f64 {
        lin.weight.value[(0, 0)]
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        let mut lin = scalar_model(0.37, Some(0.0));
        opt.step(&mut lin).unwrap();
        assert_eq!(value(&lin), 0.37);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        let mut lin = scalar_model(0.0, Some(1.0));
        opt.step(&mut lin).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction
        let expect = -1e-4 * 1.0 / (1.0 + 1e-8);
        assert!((value(&lin) - expect).abs() < 1e-18);
    }

    #[test]
    fn decay_alone_shrinks_multiplicatively() {
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut lin = scalar_model(2.0, Some(0.0));
        opt.step(&mut lin).unwrap();
        assert!((value(&lin) - 2.0 * (1.0 - 1e-4 * 0.01)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_surfaced() {
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut lin = scalar_model(1.0, Some(f64::NAN));
        assert!(matches!(opt.step(&mut lin), Err(Error::Numerical(_))));
        assert_eq!(value(&lin), 1.0);
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn frozen_parameters_are_untouched() {
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut lin = Linear::new(Matrix::from_vec(1, 1, vec![1.0]).unwrap(), None);
        lin.weight = Param::frozen(lin.weight.value.clone());
        opt.step(&mut lin).unwrap();
        assert_eq!(value(&lin), 1.0);
        assert!(opt.moments.is_empty());
    }
}
