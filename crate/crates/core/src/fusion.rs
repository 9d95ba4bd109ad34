//! PCA reduction of pooled prompt features and assembly of the two-channel
//! model input.
//!
//! Channel 0 is the standardized light-curve tokens with the reduced
//! statistics vector added to every row; channel 1 repeats the reduced
//! history vector on every row.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::linalg::{symmetric_eigen, Matrix};
use crate::scalar::Scalar;
use crate::text_encoder::TokenFeatures;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct PcaModel<T> {
    pub mean: Vec<T>,
    /// `[k × d]`, orthonormal rows by descending variance, then zero rows.
    pub components: Matrix<T>,
    /// Sample variance (denominator `n − 1`) along each component.
    pub explained_variance: Vec<T>,
    /// Trailing rows that are zero because the data spans fewer than `k`
    /// directions.
    pub padded: usize,
}

impl<T: Scalar> PcaModel<T> {
    pub fn k(&self) -> usize {
        self.components.rows()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Fits the top-`k` principal directions of the rows of `x`.
pub fn pca_fit<T: Scalar>(x: &Matrix<T>, k: usize) -> Result<PcaModel<T>> {
    let (n, d) = x.shape();
    if n < 2 {
        return Err(Error::Validation(format!("PCA needs at least two rows, got {n}")));
    }
    if k == 0 || k > d {
        return Err(Error::Config(format!("PCA output dimension {k} must lie in 1..={d}")));
    }
    let mean = x.mean_rows();
    let centered = Matrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.t_matmul(&centered)?.scale(T::one() / T::of((n - 1) as f64));
    let (values, vectors) = symmetric_eigen(&cov)?;

    let top = values.first().copied().unwrap_or(T::zero()).max(T::zero());
    let cutoff = top * T::epsilon() * T::of(1e4);
    let mut components = Matrix::zeros(k, d);
    let mut explained = vec![T::zero(); k];
    let mut padded = 0;
    for c in 0..k {
        let lambda = values[c];
        if !(lambda > cutoff) || top == T::zero() {
            padded += 1;
            continue;
        }
        // Sign convention: largest-magnitude entry positive.
        let mut pivot = 0;
        for r in 1..d {
            if vectors[(r, c)].abs() > vectors[(pivot, c)].abs() {
                pivot = r;
            }
        }
        let sign = if vectors[(pivot, c)] < T::zero() { -T::one() } else { T::one() };
        for r in 0..d {
            components[(c, r)] = sign * vectors[(r, c)];
        }
        explained[c] = lambda;
    }
    Ok(PcaModel {
        mean,
        components,
        explained_variance: explained,
        padded,
    })
}

/// `components · (x − mean)`.
pub fn pca_transform<T: Scalar>(model: &PcaModel<T>, x: &[T]) -> Result<Vec<T>> {
    if x.len() != model.dim() {
        return Err(shape_err!("PCA fitted on {} features got {}", model.dim(), x.len()));
    }
    let centered: Vec<T> = x.iter().zip(&model.mean).map(|(&a, &m)| a - m).collect();
    Ok((0..model.k())
        .map(|c| crate::linalg::dot(model.components.row(c), &centered))
        .collect())
}

/// Maps reduced coordinates back to feature space.
pub fn pca_reconstruct<T: Scalar>(model: &PcaModel<T>, z: &[T]) -> Result<Vec<T>> {
    if z.len() != model.k() {
        return Err(shape_err!("{} coordinates for {} components", z.len(), model.k()));
    }
    let mut out = model.mean.clone();
    for (c, &zc) in z.iter().enumerate() {
        for (o, &w) in out.iter_mut().zip(model.components.row(c)) {
            *o += zc * w;
        }
    }
    Ok(out)
}

/// `[tokens × token_len × 2]`, stored channel-innermost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct FusedInput<T> {
    pub tokens: usize,
    pub token_len: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> FusedInput<T> {
    #[inline]
    pub fn get(&self, token: usize, pos: usize, channel: usize) -> T {
        self.data[(token * self.token_len + pos) * 2 + channel]
    }

    pub fn channel(&self, channel: usize) -> Matrix<T> {
        Matrix::from_fn(self.tokens, self.token_len, |j, i| self.get(j, i, channel))
    }

    /// One row per token: channel 0 followed by channel 1.
    pub fn token_rows(&self) -> Matrix<T> {
        let w = self.token_len;
        Matrix::from_fn(self.tokens, 2 * w, |j, c| {
            if c < w {
                self.get(j, c, 0)
            } else {
                self.get(j, c - w, 1)
            }
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Channel 0 row `j` = `light[j] + stats`; channel 1 row `j` = `history`.
/// A missing vector contributes zeros.
pub fn fuse_vectors<T: Scalar>(
    light: &Matrix<T>,
    stats: Option<&[T]>,
    history: Option<&[T]>,
) -> Result<FusedInput<T>> {
    let (tokens, w) = light.shape();
    for (name, v) in [("statistics", stats), ("history", history)] {
        if let Some(v) = v {
            if v.len() != w {
                return Err(shape_err!("{name} vector of {} for token length {w}", v.len()));
            }
        }
    }
    let mut data = Vec::with_capacity(tokens * w * 2);
    for j in 0..tokens {
        for i in 0..w {
            let s = stats.map_or(T::zero(), |s| s[i]);
            data.push(light[(j, i)] + s);
            data.push(history.map_or(T::zero(), |h| h[i]));
        }
    }
    Ok(FusedInput {
        tokens,
        token_len: w,
        data,
    })
}

/// PCA models for the two prompt streams; `None` until fitted.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct FusionPca<T> {
    pub stats: Option<PcaModel<T>>,
    pub history: Option<PcaModel<T>>,
}

impl<T: Scalar> FusionPca<T> {
    fn reduce(model: Option<&PcaModel<T>>, pooled: &[T], name: &str) -> Result<Vec<T>> {
        let model = model.ok_or_else(|| Error::State(format!("{name} PCA has not been fitted")))?;
        pca_transform(model, pooled)
    }

    pub fn reduce_stats(&self, pooled: &[T]) -> Result<Vec<T>> {
        Self::reduce(self.stats.as_ref(), pooled, "statistics")
    }

    pub fn reduce_history(&self, pooled: &[T]) -> Result<Vec<T>> {
        Self::reduce(self.history.as_ref(), pooled, "history")
    }
}

/// Pools each prompt's token features, reduces them to the token length and
/// fuses them with the light-curve tokens. `None` prompts are ablated.
pub fn fuse<T: Scalar>(
    light: &Matrix<T>,
    stats: Option<&TokenFeatures<T>>,
    history: Option<&TokenFeatures<T>>,
    pca: &FusionPca<T>,
) -> Result<FusedInput<T>> {
    let s = stats.map(|f| pca.reduce_stats(&f.pooled())).transpose()?;
    let h = history.map(|f| pca.reduce_history(&f.pooled())).transpose()?;
    fuse_vectors(light, s.as_deref(), h.as_deref())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::peft::gaussian;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn line_has_one_direction() {
        let x = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 2.0], vec![2.0, 4.0], vec![-1.0, -2.0]])
            .unwrap();
        let p = pca_fit(&x, 2).unwrap();
        let s5 = 5f64.sqrt();
        assert!((p.components[(0, 0)] - 1.0 / s5).abs() < 1e-12);
        assert!((p.components[(0, 1)] - 2.0 / s5).abs() < 1e-12);
        assert_eq!(p.explained_variance[1], 0.0);
        assert_eq!(p.padded, 1);
        assert_eq!(p.components.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn identical_rows_pad_everything() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]]).unwrap();
        let p = pca_fit(&x, 2).unwrap();
        assert_eq!(p.padded, 2);
        assert!(p.explained_variance.iter().all(|&v| v == 0.0));
        assert_eq!(pca_transform(&p, &[5.0, 5.0, 5.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn single_row_is_rejected() {
        assert!(pca_fit(&Matrix::<f64>::zeros(1, 3), 1).is_err());
        assert!(pca_fit(&Matrix::<f64>::zeros(3, 3), 4).is_err());
    }

    #[test]
    fn mean_maps_to_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = gaussian::<f64, _>(&mut rng, 10, 5, 1.0);
        let p = pca_fit(&x, 3).unwrap();
        assert!(pca_transform(&p, &p.mean).unwrap().iter().all(|v| v.abs() < 1e-15));
        assert!(pca_transform(&p, &[0.0; 4]).is_err());
    }

    #[test]
    fn projected_variance_matches_explained() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = gaussian::<f64, _>(&mut rng, 12, 5, 1.0);
        let p = pca_fit(&x, 4).unwrap();
        let z: Vec<Vec<f64>> = (0..12).map(|i| pca_transform(&p, x.row(i)).unwrap()).collect();
        for c in 0..4 {
            let m = z.iter().map(|r| r[c]).sum::<f64>() / 12.0;
            let var = z.iter().map(|r| (r[c] - m).powi(2)).sum::<f64>() / 11.0;
            assert!((var - p.explained_variance[c]).abs() < 1e-12);
        }
        assert!(p.explained_variance.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn worked_fusion_example() {
        let light = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let f = fuse_vectors(&light, Some(&[10.0, 10.0]), Some(&[5.0, 6.0])).unwrap();
        assert_eq!(f.channel(0), Matrix::from_rows(&[vec![11.0, 12.0], vec![13.0, 14.0]]).unwrap());
        assert_eq!(f.channel(1), Matrix::from_rows(&[vec![5.0, 6.0], vec![5.0, 6.0]]).unwrap());
        assert_eq!(f.token_rows().row(0), &[11.0, 12.0, 5.0, 6.0]);
    }

    #[test]
    fn ablated_prompts_leave_light_curve_only() {
        let light = Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 4.0]]).unwrap();
        let f = fuse_vectors(&light, None, None).unwrap();
        assert_eq!(f.channel(0), light);
        assert!(f.channel(1).as_slice().iter().all(|&v| v == 0.0));
        let z = fuse_vectors(&light, Some(&[0.0, 0.0]), Some(&[0.0, 0.0])).unwrap();
        assert_eq!(z, f);
    }

    #[test]
    fn unfitted_pca_is_an_error() {
        let light = Matrix::<f64>::zeros(2, 2);
        let feats = TokenFeatures {
            features: Matrix::zeros(3, 4),
            valid: vec![true; 3],
        };
        assert!(fuse(&light, Some(&feats), None, &FusionPca::default()).is_err());
        assert!(fuse(&light, None, None, &FusionPca::default()).is_ok());
    }
}
