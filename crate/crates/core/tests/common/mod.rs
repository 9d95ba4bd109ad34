//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stellarf::linalg::Matrix;
use stellarf::model::{Classifier, ModelConfig};
use stellarf::peft::{gaussian, Encoder, EncoderConfig, EncoderLayer, Linear, Param, Parameters, TrainPolicy};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---- metrics ----

/// Fraction of (positive, negative) pairs ordered correctly, ties as 1/2.
pub fn brute_auc(labels: &[bool], scores: &[f64]) -> f64 {
    let (mut good, mut pairs) = (0.0, 0.0);
    for (i, &yi) in labels.iter().enumerate() {
        for (j, &yj) in labels.iter().enumerate() {
            if yi && !yj {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    good += 1.0;
                } else if scores[i] == scores[j] {
                    good += 0.5;
                }
            }
        }
    }
    good / pairs
}

/// Walks every distinct score as a threshold, counting from scratch.
pub fn enumerated_auprc(labels: &[bool], scores: &[f64]) -> f64 {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let positives = labels.iter().filter(|&&y| y).count() as f64;
    let mut area = 0.0;
    let mut last_recall = 0.0;
    for t in thresholds {
        let tp = labels.iter().zip(scores).filter(|(&y, &s)| y && s >= t).count() as f64;
        let flagged = scores.iter().filter(|&&s| s >= t).count() as f64;
        let recall = tp / positives;
        area += (recall - last_recall) * (tp / flagged);
        last_recall = recall;
    }
    area
}

// ---- windowing ----

/// Counts offsets `S, 2S, …` whose `P`-point window still fits in `K` points.
pub fn brute_window_steps(k: usize, p: usize, s: usize) -> usize {
    let mut n = 0;
    let mut off = s;
    while off + p <= k {
        n += 1;
        off += s;
    }
    n
}

// ---- PCA ----

/// Top-`k` eigenvectors of the sample covariance, as columns.
pub fn dense_pca_basis(x: &Matrix<f64>, k: usize) -> DMatrix<f64> {
    let (n, d) = x.shape();
    let m = DMatrix::from_fn(n, d, |i, j| x[(i, j)]);
    let mean = m.row_mean();
    let c = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
    let cov = (c.transpose() * &c) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    DMatrix::from_fn(d, k, |i, j| eig.eigenvectors[(i, order[j])])
}

/// Sine of the largest principal angle between two orthonormal bases:
/// `‖(I − UUᵀ) V‖₂`.
pub fn principal_angle_sine(u: &DMatrix<f64>, v: &DMatrix<f64>) -> f64 {
    let d = u.nrows();
    let resid = (DMatrix::<f64>::identity(d, d) - u * u.transpose()) * v;
    resid.singular_values().max()
}

// ---- straight-line encoder ----

type Mat = Vec<Vec<f64>>;

fn to_rows(m: &Matrix<f64>) -> Mat {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// `x Wᵀ (+ b)` by explicit loops.
fn affine(x: &Mat, w: &Param<f64>, b: Option<&Param<f64>>) -> Mat {
    let (out, inp) = w.value.shape();
    x.iter()
        .map(|row| {
            (0..out)
                .map(|o| {
                    let mut s = b.map_or(0.0, |b| b.value[(0, o)]);
                    for i in 0..inp {
                        s += row[i] * w.value[(o, i)];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

fn linear(x: &Mat, l: &Linear<f64>) -> Mat {
    affine(x, &l.weight, l.bias.as_ref())
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

fn layer_norm(x: &Mat, gain: &Param<f64>, bias: &Param<f64>, eps: f64) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + eps).sqrt() * gain.value[(0, j)] + bias.value[(0, j)])
                .collect()
        })
        .collect()
}

fn lora(x: &Mat, l: &stellarf::peft::LoraLinear<f64>) -> Mat {
    let base = linear(x, &l.base);
    let r = l.a.value.rows();
    if !l.enabled || r == 0 {
        return base;
    }
    let s = l.alpha / r as f64;
    let low = affine(x, &l.a, None);
    let delta = affine(&low, &l.b, None);
    base.iter()
        .zip(&delta)
        .map(|(b, d)| b.iter().zip(d).map(|(x, y)| x + s * y).collect())
        .collect()
}

fn attention(x: &Mat, l: &EncoderLayer<f64>, mask: &[bool]) -> Mat {
    let a = &l.attn;
    let (q, k, v) = (lora(x, &a.query), lora(x, &a.key), lora(x, &a.value));
    let t = x.len();
    let d = q[0].len();
    let dh = d / a.heads;
    let any = mask.iter().any(|&m| m);
    let mut concat = vec![vec![0.0; d]; t];
    for h in 0..a.heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..t {
            let mut logits = vec![f64::NEG_INFINITY; t];
            for j in 0..t {
                if !any || mask[j] {
                    logits[j] = cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt();
                }
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                concat[i][c] = (0..t).map(|j| e[j] / z * v[j][c]).sum();
            }
        }
    }
    linear(&concat, &a.output)
}

/// Evaluates the encoder stack from its weights with plain loops.
pub fn reference_encoder(enc: &Encoder<f64>, x: &Matrix<f64>, mask: &[bool]) -> Matrix<f64> {
    let mut h = to_rows(x);
    for l in &enc.layers {
        let a = layer_norm(&h, &l.ln_attn.gain, &l.ln_attn.bias, l.ln_attn.eps);
        let h1 = add(&h, &attention(&a, l, mask));
        let b = layer_norm(&h1, &l.ln_ffn.gain, &l.ln_ffn.bias, l.ln_ffn.eps);
        let up: Mat = linear(&b, &l.ffn.up).into_iter().map(|r| r.into_iter().map(gelu).collect()).collect();
        let f = linear(&up, &l.ffn.down);
        let ad = if l.adapter.enabled {
            let pre: Mat = affine(&f, &l.adapter.down, None)
                .into_iter()
                .map(|r| r.into_iter().map(gelu).collect())
                .collect();
            add(&f, &affine(&pre, &l.adapter.up, None))
        } else {
            f
        };
        h = add(&h1, &ad);
    }
    Matrix::from_rows(&h).unwrap()
}

// ---- random builders ----

pub fn random_encoder_config<R: Rng>(rng: &mut R) -> EncoderConfig {
    let heads = rng.random_range(1..=3);
    let d_model = heads * rng.random_range(1..=4);
    EncoderConfig {
        layers: rng.random_range(1..=2),
        heads,
        d_model,
        d_ffn: rng.random_range(2..=10),
        lora_rank: rng.random_range(1..=3),
        lora_alpha: rng.random_range(1..=8),
        adapter_dim: rng.random_range(1..=4),
    }
}

/// Replaces every zero-initialized adaptation factor with Gaussian noise so
/// that all branches carry signal.
pub fn perturb_adapters<R: Rng>(enc: &mut Encoder<f64>, rng: &mut R, std: f64) {
    enc.visit_mut("", &mut |name, p| {
        if name.ends_with("lora_b") || name.ends_with("adapter.up") {
            let (r, c) = p.value.shape();
            p.value = gaussian(rng, r, c, std);
        }
    });
}

pub fn random_classifier<R: Rng>(rng: &mut R, policy: TrainPolicy) -> Classifier<f64> {
    let encoder = random_encoder_config(rng);
    let cfg = ModelConfig {
        encoder,
        tokens: rng.random_range(1..=3),
        token_len: rng.random_range(1..=3),
        head_hidden: rng.random_range(1..=4),
        backbone_seed: rng.random(),
    };
    let mut m = Classifier::new(cfg, policy, rng.random()).unwrap();
    perturb_adapters(&mut m.encoder, rng, 0.5);
    m
}

// ---- finite differences ----

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub worst_rel_err: f64,
    pub entries: usize,
}

/// Compares the accumulated gradients of every trainable parameter with
/// central differences of `loss`. `analytic` must fill the gradient slots.
pub fn check_gradients<M: Parameters<f64> + Clone>(
    model: &M,
    loss: impl Fn(&M) -> f64,
    analytic: impl Fn(&mut M),
    h: f64,
) -> Vec<GradCheck> {
    let mut with_grad = model.clone();
    with_grad.zero_grad();
    analytic(&mut with_grad);
    let mut grads: Vec<(String, Option<Matrix<f64>>)> = Vec::new();
    with_grad.visit("", &mut |n, p| {
        if p.trainable {
            grads.push((n.to_string(), p.grad.clone()));
        }
    });
    let mut out = Vec::new();
    for (name, grad) in grads {
        let mut worst: f64 = 0.0;
        let mut entries = 0;
        let len = {
            let mut len = 0;
            model.visit("", &mut |n, p| {
                if n == name {
                    len = p.len();
                }
            });
            len
        };
        for idx in 0..len {
            let shifted = |delta: f64| {
                let mut m = model.clone();
                m.visit_mut("", &mut |n, p| {
                    if n == name {
                        p.value.as_mut_slice()[idx] += delta;
                    }
                });
                loss(&m)
            };
            let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
            let a = grad.as_ref().map_or(0.0, |g| g.as_slice()[idx]);
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((a - numeric).abs() / denom);
            entries += 1;
        }
        out.push(GradCheck {
            name,
            worst_rel_err: worst,
            entries,
        });
    }
    out
}

// ---- small training fixtures ----

use stellarf::dataset::{PreparedDataset, PreparedSample};
use stellarf::text_encoder::TextEncoderConfig;
use stellarf::windowing::PatchConfig;

pub fn tiny_patch() -> PatchConfig {
    PatchConfig {
        patch_len: 32,
        stride: 8,
        pred_len: 8,
        token_len: 8,
    }
}

pub fn tiny_text() -> TextEncoderConfig {
    TextEncoderConfig {
        encoder: EncoderConfig {
            layers: 1,
            heads: 2,
            d_model: 16,
            d_ffn: 32,
            lora_rank: 2,
            lora_alpha: 4,
            adapter_dim: 4,
        },
        ..TextEncoderConfig::default()
    }
}

pub fn tiny_model() -> ModelConfig {
    let p = tiny_patch();
    ModelConfig {
        encoder: EncoderConfig {
            layers: 1,
            heads: 2,
            d_model: 16,
            d_ffn: 32,
            lora_rank: 2,
            lora_alpha: 4,
            adapter_dim: 4,
        },
        tokens: p.tokens(),
        token_len: p.token_len,
        head_hidden: 8,
        backbone_seed: 99,
    }
}

/// Labels are the sign of the same linear functional summed over every light
/// token, with a margin; text features are noise.
pub fn separable_dataset(n: usize, stars: usize, seed: u64) -> PreparedDataset<f64> {
    let patch = tiny_patch();
    let mut r = rng(seed);
    let (t, l) = (patch.tokens(), patch.token_len);
    let w: Vec<f64> = (0..t * l).map(|i| if i % l < l / 2 { 1.0 } else { -1.0 }).collect();
    let mut samples = Vec::with_capacity(n);
    while samples.len() < n {
        let light = gaussian(&mut r, t, l, 1.0);
        let score: f64 = light.as_slice().iter().zip(&w).map(|(a, b)| a * b).sum();
        if score.abs() < 2.0 {
            continue;
        }
        let i = samples.len();
        samples.push(PreparedSample {
            star_id: format!("S{:04}", i % stars),
            label: score > 0.0,
            light,
            stats: (0..16).map(|_| r.random_range(-1.0..1.0)).collect(),
            history: (0..16).map(|_| r.random_range(-1.0..1.0)).collect(),
        });
    }
    PreparedDataset {
        patch,
        patch_hash: patch.fingerprint(),
        text: tiny_text(),
        text_digest: "separable".into(),
        dataset_hash: "separable".into(),
        samples,
    }
}
