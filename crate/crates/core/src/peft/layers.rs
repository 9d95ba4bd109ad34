use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{gaussian, join, Param, Parameters};
use crate::error::{shape_err, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

const GELU_CUBIC: f64 = 0.044_715;

/// tanh approximation of GELU.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + T::of(GELU_CUBIC) * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let half = T::of(0.5);
    let k = T::of(GELU_CUBIC);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * k * x * x)
}

/// `y = x Wᵀ + b` with `W` stored `[d_out × d_in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(weight: Matrix<T>, bias: Option<Vec<T>>) -> Self {
        let bias = bias.map(|b| Param::frozen(Matrix::from_vec(1, b.len(), b).expect("row")));
        Self {
            weight: Param::frozen(weight),
            bias,
        }
    }

    pub fn random<R: Rng>(rng: &mut R, d_in: usize, d_out: usize, bias_std: Option<f64>) -> Self {
        let weight = gaussian(rng, d_out, d_in, 1.0 / (d_in as f64).sqrt());
        let bias = bias_std.map(|s| gaussian(rng, 1, d_out, s));
        Self {
            weight: Param::frozen(weight),
            bias: bias.map(Param::frozen),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn set_trainable(&mut self, on: bool) {
        self.weight.trainable = on;
        if let Some(b) = &mut self.bias {
            b.trainable = on;
        }
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let mut y = x.matmul_t(&self.weight.value)?;
        if let Some(b) = &self.bias {
            y.add_row_broadcast(b.value.as_slice())?;
        }
        Ok(y)
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&mut self, x: &Matrix<T>, grad: &Matrix<T>) -> Result<Matrix<T>> {
        if self.weight.trainable {
            self.weight.accumulate(&grad.t_matmul(x)?);
        }
        if let Some(b) = &mut self.bias {
            if b.trainable {
                let sums = grad.sum_rows();
                b.accumulate(&Matrix::from_vec(1, sums.len(), sums)?);
            }
        }
        grad.matmul(&self.weight.value)
    }
}

impl<T: Scalar> Parameters<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct LayerNorm<T> {
    pub gain: Param<T>,
    pub bias: Param<T>,
    pub eps: T,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    normalized: Matrix<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(d: usize) -> Self {
        Self {
            gain: Param::frozen(Matrix::from_fn(1, d, |_, _| T::one())),
            bias: Param::frozen(Matrix::zeros(1, d)),
            eps: T::of(1e-5),
        }
    }

    /// Gains near one and biases near zero, as a trained network would have.
    pub fn random<R: Rng>(rng: &mut R, d: usize) -> Self {
        let mut ln = Self::new(d);
        let jitter: Matrix<T> = gaussian(rng, 1, d, 0.02);
        ln.gain.value = ln.gain.value.add(&jitter).expect("same shape");
        ln.bias.value = gaussian(rng, 1, d, 0.02);
        ln
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<(Matrix<T>, LayerNormCache<T>)> {
        let d = self.gain.value.cols();
        if x.cols() != d {
            return Err(shape_err!("layer norm over {d} features got {:?}", x.shape()));
        }
        let n = T::of(d as f64);
        let mut normalized = Matrix::zeros(x.rows(), d);
        let mut y = Matrix::zeros(x.rows(), d);
        let mut inv_std = Vec::with_capacity(x.rows());
        let (g, b) = (self.gain.value.as_slice(), self.bias.value.as_slice());
        for i in 0..x.rows() {
            let row = x.row(i);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let r = T::one() / (var + self.eps).sqrt();
            inv_std.push(r);
            for j in 0..d {
                let xh = (row[j] - mean) * r;
                normalized[(i, j)] = xh;
                y[(i, j)] = xh * g[j] + b[j];
            }
        }
        Ok((y, LayerNormCache { normalized, inv_std }))
    }

    pub fn backward(&mut self, cache: &LayerNormCache<T>, grad: &Matrix<T>) -> Result<Matrix<T>> {
        let d = self.gain.value.cols();
        let n = T::of(d as f64);
        if self.gain.trainable {
            self.gain.accumulate(&Matrix::from_vec(
                1,
                d,
                grad.hadamard(&cache.normalized)?.sum_rows(),
            )?);
        }
        if self.bias.trainable {
            self.bias.accumulate(&Matrix::from_vec(1, d, grad.sum_rows())?);
        }
        let g = self.gain.value.as_slice();
        let mut dx = Matrix::zeros(grad.rows(), d);
        for i in 0..grad.rows() {
            let xh = cache.normalized.row(i);
            let gr = grad.row(i);
            let mut mean_d = T::zero();
            let mut mean_dx = T::zero();
            for j in 0..d {
                let dxh = gr[j] * g[j];
                mean_d += dxh;
                mean_dx += dxh * xh[j];
            }
            mean_d /= n;
            mean_dx /= n;
            let r = cache.inv_std[i];
            for j in 0..d {
                dx[(i, j)] = r * (gr[j] * g[j] - mean_d - xh[j] * mean_dx);
            }
        }
        Ok(dx)
    }
}

impl<T: Scalar> Parameters<T> for LayerNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "gain"), &self.gain);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "gain"), &mut self.gain);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Two-layer GELU feed-forward block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct FeedForward<T> {
    pub up: Linear<T>,
    pub down: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct FeedForwardCache<T> {
    input: Matrix<T>,
    pre: Matrix<T>,
    hidden: Matrix<T>,
}

impl<T: Scalar> FeedForward<T> {
    pub fn random<R: Rng>(rng: &mut R, d_model: usize, d_ffn: usize) -> Self {
        Self {
            up: Linear::random(rng, d_model, d_ffn, Some(0.02)),
            down: Linear::random(rng, d_ffn, d_model, Some(0.02)),
        }
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<(Matrix<T>, FeedForwardCache<T>)> {
        let pre = self.up.forward(x)?;
        let hidden = pre.map(gelu);
        let y = self.down.forward(&hidden)?;
        Ok((
            y,
            FeedForwardCache {
                input: x.clone(),
                pre,
                hidden,
            },
        ))
    }

    pub fn backward(&mut self, cache: &FeedForwardCache<T>, grad: &Matrix<T>) -> Result<Matrix<T>> {
        let dh = self.down.backward(&cache.hidden, grad)?;
        let dpre = dh.hadamard(&cache.pre.map(gelu_grad))?;
        self.up.backward(&cache.input, &dpre)
    }
}

impl<T: Scalar> Parameters<T> for FeedForward<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.up.visit(&join(prefix, "up"), f);
        self.down.visit(&join(prefix, "down"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.up.visit_mut(&join(prefix, "up"), f);
        self.down.visit_mut(&join(prefix, "down"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(1.0f64) - 0.841_191_990_608_276_8).abs() < 1e-12);
        let h = 1e-6;
        for &x in &[-2.0f64, -0.3, 0.0, 0.7, 3.0] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn linear_gradient_of_sum() {
        // f = sum(x Wᵀ) => dW[o][i] = Σ_n x[n][i], dx[n][i] = Σ_o W[o][i]
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0]]).unwrap();
        let mut lin = Linear::new(
            Matrix::from_rows(&[vec![0.5, -1.0], vec![2.0, 1.0], vec![0.0, 1.0]]).unwrap(),
            None,
        );
        lin.set_trainable(true);
        let ones = Matrix::from_fn(2, 3, |_, _| 1.0);
        let dx = lin.backward(&x, &ones).unwrap();
        let dw = lin.weight.grad.clone().unwrap();
        for o in 0..3 {
            assert_eq!(dw.row(o), &[4.0, 1.0]);
        }
        assert_eq!(dx.row(0), &[2.5, 1.0]);
    }

    #[test]
    fn frozen_layers_collect_no_gradient() {
        let mut lin = Linear::<f64>::new(Matrix::identity(2), Some(vec![0.0, 0.0]));
        let x = Matrix::identity(2);
        lin.backward(&x, &x).unwrap();
        assert!(lin.weight.grad.is_none());
        assert!(lin.bias.as_ref().unwrap().grad.is_none());
    }
}
