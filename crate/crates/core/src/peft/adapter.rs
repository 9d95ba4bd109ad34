use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{gaussian, gelu, gelu_grad, join, Param, Parameters};
use crate::error::{shape_err, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Bottleneck residual block `h + GELU(h W_downᵀ) W_upᵀ`.
///
/// `W_up` starts at zero, so a fresh block is the identity map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Adapter<T> {
    /// `[d_b × d_model]`
    pub down: Param<T>,
    /// `[d_model × d_b]`
    pub up: Param<T>,
    pub enabled: bool,
}

#[derive(Debug, Clone)]
pub struct AdapterCache<T> {
    input: Matrix<T>,
    pre: Matrix<T>,
    act: Matrix<T>,
}

impl<T: Scalar> Adapter<T> {
    pub fn new(down: Matrix<T>, up: Matrix<T>) -> Result<Self> {
        if down.rows() != up.cols() || down.cols() != up.rows() {
            return Err(shape_err!(
                "adapter down {:?} and up {:?} do not chain",
                down.shape(),
                up.shape()
            ));
        }
        Ok(Self {
            down: Param::trainable(down),
            up: Param::trainable(up),
            enabled: true,
        })
    }

    pub fn init<R: Rng>(rng: &mut R, d_model: usize, bottleneck: usize) -> Self {
        let down = gaussian(rng, bottleneck, d_model, 1.0 / (d_model as f64).sqrt());
        Self::new(down, Matrix::zeros(d_model, bottleneck)).expect("shapes built to match")
    }

    pub fn set_enabled(&mut self, on: bool) {
        self.enabled = on;
        self.down.trainable = on;
        self.up.trainable = on;
    }

    pub fn forward(&self, h: &Matrix<T>) -> Result<(Matrix<T>, Option<AdapterCache<T>>)> {
        if !self.enabled {
            return Ok((h.clone(), None));
        }
        if h.cols() != self.down.value.cols() {
            return Err(shape_err!(
                "adapter over {} features got {:?}",
                self.down.value.cols(),
                h.shape()
            ));
        }
        let pre = h.matmul_t(&self.down.value)?;
        let act = pre.map(gelu);
        let mut out = act.matmul_t(&self.up.value)?;
        out.add_assign(h)?;
        Ok((
            out,
            Some(AdapterCache {
                input: h.clone(),
                pre,
                act,
            }),
        ))
    }

    pub fn backward(&mut self, cache: Option<&AdapterCache<T>>, grad: &Matrix<T>) -> Result<Matrix<T>> {
        let Some(cache) = cache else {
            return Ok(grad.clone());
        };
        if self.up.trainable {
            self.up.accumulate(&grad.t_matmul(&cache.act)?);
        }
        let d_act = grad.matmul(&self.up.value)?;
        let d_pre = d_act.hadamard(&cache.pre.map(gelu_grad))?;
        if self.down.trainable {
            self.down.accumulate(&d_pre.t_matmul(&cache.input)?);
        }
        let mut dh = d_pre.matmul(&self.down.value)?;
        dh.add_assign(grad)?;
        Ok(dh)
    }
}

impl<T: Scalar> Parameters<T> for Adapter<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "down"), &self.down);
        f(&join(prefix, "up"), &self.up);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "down"), &mut self.down);
        f(&join(prefix, "up"), &mut self.up);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fresh_adapter_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ad = Adapter::<f64>::init(&mut rng, 8, 3);
        let h = gaussian::<f64, _>(&mut rng, 5, 8, 1.0);
        assert_eq!(ad.forward(&h).unwrap().0, h);
    }

    #[test]
    fn scalar_case_at_zero() {
        let one = Matrix::from_rows(&[vec![1.0f64]]).unwrap();
        let ad = Adapter::new(one.clone(), one).unwrap();
        let h = Matrix::from_rows(&[vec![0.0f64]]).unwrap();
        assert_eq!(ad.forward(&h).unwrap().0.as_slice(), &[0.0]);
    }

    #[test]
    fn matches_straight_line_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let down = gaussian::<f64, _>(&mut rng, 3, 5, 0.7);
        let up = gaussian::<f64, _>(&mut rng, 5, 3, 0.7);
        let ad = Adapter::new(down.clone(), up.clone()).unwrap();
        let h = gaussian::<f64, _>(&mut rng, 4, 5, 1.0);
        let out = ad.forward(&h).unwrap().0;
        for n in 0..4 {
            for i in 0..5 {
                let mut acc = h[(n, i)];
                for b in 0..3 {
                    let z: f64 = (0..5).map(|j| down[(b, j)] * h[(n, j)]).sum();
                    let c = (2.0 / std::f64::consts::PI).sqrt();
                    let g = 0.5 * z * (1.0 + (c * (z + 0.044715 * z.powi(3))).tanh());
                    acc += up[(i, b)] * g;
                }
                assert!((out[(n, i)] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Adapter::<f64>::new(Matrix::zeros(2, 4), Matrix::zeros(3, 2)).is_err());
        let ad = Adapter::<f64>::new(Matrix::zeros(2, 4), Matrix::zeros(4, 2)).unwrap();
        assert!(ad.forward(&Matrix::zeros(1, 3)).is_err());
    }
}
