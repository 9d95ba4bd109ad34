use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{join, Linear, LoraCache, LoraLinear, Param, Parameters};
use crate::error::{shape_err, Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Multi-head self-attention with low-rank adapted Q/K/V projections and a
/// frozen output projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct MultiHeadAttention<T> {
    pub query: LoraLinear<T>,
    pub key: LoraLinear<T>,
    pub value: LoraLinear<T>,
    pub output: Linear<T>,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    q_cache: LoraCache<T>,
    k_cache: LoraCache<T>,
    v_cache: LoraCache<T>,
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    /// Row-stochastic attention weights, one matrix per head.
    pub probs: Vec<Matrix<T>>,
    concat: Matrix<T>,
}

/// Row softmax; masked (`false`) keys get weight zero.
fn masked_softmax<T: Scalar>(scores: &mut Matrix<T>, key_valid: &[bool]) {
    for i in 0..scores.rows() {
        let row = scores.row_mut(i);
        let mut max = T::neg_infinity();
        for (s, &ok) in row.iter_mut().zip(key_valid) {
            if ok {
                max = max.max(*s);
            } else {
                *s = T::neg_infinity();
            }
        }
        let mut sum = T::zero();
        for s in row.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        for s in row.iter_mut() {
            *s /= sum;
        }
    }
}

impl<T: Scalar> MultiHeadAttention<T> {
    pub fn random<R: Rng>(
        backbone: &mut R,
        adapt: &mut R,
        d_model: usize,
        heads: usize,
        rank: usize,
        alpha: f64,
    ) -> Self {
        let proj = |rng: &mut R| Linear::random(rng, d_model, d_model, Some(0.02));
        let (q, k, v, o) = (proj(backbone), proj(backbone), proj(backbone), proj(backbone));
        Self {
            query: LoraLinear::wrap(adapt, q, rank, alpha),
            key: LoraLinear::wrap(adapt, k, rank, alpha),
            value: LoraLinear::wrap(adapt, v, rank, alpha),
            output: o,
            heads,
        }
    }

    pub fn d_model(&self) -> usize {
        self.output.d_out()
    }

    /// `key_valid[j] == false` excludes token `j` as a key, unless every
    /// token is excluded, in which case none is.
    pub fn forward(&self, x: &Matrix<T>, key_valid: &[bool]) -> Result<(Matrix<T>, AttentionCache<T>)> {
        let d = self.d_model();
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d} not divisible by {} heads",
                self.heads
            )));
        }
        if x.cols() != d || key_valid.len() != x.rows() {
            return Err(shape_err!(
                "attention input {:?} with mask of {} for d_model {d}",
                x.shape(),
                key_valid.len()
            ));
        }
        // A mask that hides every key falls back to attending everywhere.
        let all = vec![true; key_valid.len()];
        let key_valid = if key_valid.iter().any(|&v| v) { key_valid } else { &all };
        let (q, q_cache) = self.query.forward(x)?;
        let (k, k_cache) = self.key.forward(x)?;
        let (v, v_cache) = self.value.forward(x)?;
        let dh = d / self.heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut concat = Matrix::zeros(x.rows(), d);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.col_block(h * dh, dh);
            let kh = k.col_block(h * dh, dh);
            let vh = v.col_block(h * dh, dh);
            let mut p = qh.matmul_t(&kh)?.scale(scale);
            masked_softmax(&mut p, key_valid);
            concat.set_col_block(h * dh, &p.matmul(&vh)?);
            probs.push(p);
        }
        let y = self.output.forward(&concat)?;
        Ok((
            y,
            AttentionCache {
                q_cache,
                k_cache,
                v_cache,
                q,
                k,
                v,
                probs,
                concat,
            },
        ))
    }

    pub fn backward(&mut self, cache: &AttentionCache<T>, grad: &Matrix<T>) -> Result<Matrix<T>> {
        let d = self.d_model();
        let dh = d / self.heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let d_concat = self.output.backward(&cache.concat, grad)?;
        let rows = grad.rows();
        let mut dq = Matrix::zeros(rows, d);
        let mut dk = Matrix::zeros(rows, d);
        let mut dv = Matrix::zeros(rows, d);
        for (h, p) in cache.probs.iter().enumerate() {
            let qh = cache.q.col_block(h * dh, dh);
            let kh = cache.k.col_block(h * dh, dh);
            let vh = cache.v.col_block(h * dh, dh);
            let d_out = d_concat.col_block(h * dh, dh);
            let dp = d_out.matmul_t(&vh)?;
            dv.set_col_block(h * dh, &p.t_matmul(&d_out)?);
            let mut ds = Matrix::zeros(rows, rows);
            for i in 0..rows {
                let (pr, dpr) = (p.row(i), dp.row(i));
                let inner: T = pr.iter().zip(dpr).map(|(&a, &b)| a * b).sum();
                for j in 0..rows {
                    ds[(i, j)] = pr[j] * (dpr[j] - inner);
                }
            }
            dq.set_col_block(h * dh, &ds.matmul(&kh)?.scale(scale));
            dk.set_col_block(h * dh, &ds.t_matmul(&qh)?.scale(scale));
        }
        let mut dx = self.query.backward(&cache.q_cache, &dq)?;
        dx.add_assign(&self.key.backward(&cache.k_cache, &dk)?)?;
        dx.add_assign(&self.value.backward(&cache.v_cache, &dv)?)?;
        Ok(dx)
    }

    /// Plain copy with each LoRA update folded into its base projection.
    pub fn merged(&self) -> Result<Self> {
        let fold = |l: &LoraLinear<T>| -> Result<LoraLinear<T>> {
            let mut out = l.clone();
            out.base = l.merged()?;
            out.b.value = Matrix::zeros(l.b.value.rows(), l.b.value.cols());
            Ok(out)
        };
        Ok(Self {
            query: fold(&self.query)?,
            key: fold(&self.key)?,
            value: fold(&self.value)?,
            output: self.output.clone(),
            heads: self.heads,
        })
    }
}

impl<T: Scalar> Parameters<T> for MultiHeadAttention<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.query.visit(&join(prefix, "query"), f);
        self.key.visit(&join(prefix, "key"), f);
        self.value.visit(&join(prefix, "value"), f);
        self.output.visit(&join(prefix, "output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.query.visit_mut(&join(prefix, "query"), f);
        self.key.visit_mut(&join(prefix, "key"), f);
        self.value.visit_mut(&join(prefix, "value"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}
