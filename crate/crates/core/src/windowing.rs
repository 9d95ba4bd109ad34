//! Sliding observation windows, their flare labels and the imbalance sweep.
//!
//! A window of `patch_len` points starts at offsets `0, stride, 2·stride, …`
//! and is labeled positive when a catalogued flare falls in the following
//! `pred_len` points, compared in timestamp space. Windows whose horizon runs
//! past the end of the curve are dropped.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::flare_context::{compute_stats, extract_history, FlareHistory, FlareStats};
use crate::lightcurve::{FlareCatalog, FlareCatalogEntry, LightCurve};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchConfig {
    pub patch_len: usize,
    pub stride: usize,
    pub pred_len: usize,
    /// Points per model token.
    pub token_len: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            patch_len: 512,
            stride: 48,
            pred_len: 480,
            token_len: 64,
        }
    }
}

impl PatchConfig {
    /// Checks `patch_len`, `stride` and `pred_len` only.
    pub fn validate_geometry(&self) -> Result<()> {
        if self.patch_len == 0 || self.stride == 0 || self.pred_len == 0 {
            return Err(Error::Config(format!(
                "patch_len, stride and pred_len must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_geometry()?;
        if self.token_len == 0 || self.token_len > self.patch_len {
            return Err(Error::Config(format!(
                "token_len {} must lie in 1..={}",
                self.token_len, self.patch_len
            )));
        }
        if self.patch_len % self.token_len != 0 {
            return Err(Error::Config(format!(
                "token_len {} does not divide patch_len {}",
                self.token_len, self.patch_len
            )));
        }
        Ok(())
    }

    /// Tokens per window.
    pub fn tokens(&self) -> usize {
        self.patch_len / self.token_len
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("plain struct serializes");
        hex_digest(&json)
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// `⌊(K − P) / S⌋` for `K ≥ P`, else 0: the number of stride steps a
/// `P`-point window can slide within a `K`-point curve.
pub fn window_count(curve_len: usize, cfg: &PatchConfig) -> usize {
    if curve_len < cfg.patch_len || cfg.stride == 0 {
        0
    } else {
        (curve_len - cfg.patch_len) / cfg.stride
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSample {
    pub star_id: String,
    pub quarter: String,
    pub start_index: usize,
    /// Timestamp of the last point in the window.
    pub end_time: f64,
    pub values: Vec<f64>,
    /// A flare erupts within the next `pred_len` points.
    pub label: bool,
    pub history: FlareHistory,
    pub stats: FlareStats,
    /// [`PatchConfig::fingerprint`] of the configuration that produced it.
    pub patch_hash: String,
}

/// Start offsets and labels, without materializing windows.
fn labeled_starts(timestamps: &[f64], flare_times: &[f64], cfg: &PatchConfig) -> Vec<(usize, bool)> {
    let k = timestamps.len();
    let span = cfg.patch_len + cfg.pred_len;
    if k < span {
        return Vec::new();
    }
    (0..=k - span)
        .step_by(cfg.stride)
        .map(|start| {
            let t_end = timestamps[start + cfg.patch_len - 1];
            let t_horizon = timestamps[start + cfg.patch_len - 1 + cfg.pred_len];
            let label = flare_times.iter().any(|&t| t > t_end && t <= t_horizon);
            (start, label)
        })
        .collect()
}

fn flare_times_for(curve: &LightCurve, entries: &[FlareCatalogEntry]) -> Vec<f64> {
    entries
        .iter()
        .filter(|e| e.star_id == curve.star_id && e.quarter == curve.quarter)
        .map(|e| e.flare_time)
        .collect()
}

pub fn partition_windows(
    curve: &LightCurve,
    entries: &[FlareCatalogEntry],
    cfg: &PatchConfig,
) -> Result<Vec<WindowSample>> {
    cfg.validate()?;
    let flux = curve.complete_flux()?;
    let flare_times = flare_times_for(curve, entries);
    let hash = cfg.fingerprint();
    Ok(labeled_starts(&curve.timestamps, &flare_times, cfg)
        .into_iter()
        .map(|(start, label)| {
            let end_time = curve.timestamps[start + cfg.patch_len - 1];
            let history = extract_history(&curve.star_id, &curve.quarter, entries, end_time);
            let stats = compute_stats(&history);
            WindowSample {
                star_id: curve.star_id.clone(),
                quarter: curve.quarter.clone(),
                start_index: start,
                end_time,
                values: flux[start..start + cfg.patch_len].to_vec(),
                label,
                history,
                stats,
                patch_hash: hash.clone(),
            }
        })
        .collect())
}

/// Zero mean, unit population standard deviation. Near-constant input, with
/// spread below `1e-12` of its magnitude, maps to zeros.
pub fn standardize_window(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    if values.is_empty() {
        return Vec::new();
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 1e-12 * mean.abs().max(f64::MIN_POSITIVE)) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - mean) / std).collect()
}

/// Splits a window into `len / token_len` contiguous rows.
pub fn tokenize_window<T: Scalar>(values: &[T], token_len: usize) -> Result<Matrix<T>> {
    if token_len == 0 || values.len() % token_len != 0 {
        return Err(Error::Config(format!(
            "token_len {token_len} does not divide window length {}",
            values.len()
        )));
    }
    Matrix::from_vec(values.len() / token_len, token_len, values.to_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub patch_len: usize,
    pub stride: usize,
    pub pred_len: usize,
    pub sample_count: usize,
    pub positives: usize,
    /// `None` when the configuration yields no samples.
    pub positive_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Pearson correlations among [`SWEEP_COLUMNS`], over rows with samples.
    /// `None` where a column has zero variance.
    pub correlation: Vec<Vec<Option<f64>>>,
}

pub const SWEEP_COLUMNS: [&str; 5] = [
    "patch_len",
    "stride",
    "pred_len",
    "sample_count",
    "positive_ratio",
];

impl SweepReport {
    /// Correlation of each hyperparameter column against `positive_ratio`.
    pub fn ratio_correlations(&self) -> Vec<(&'static str, Option<f64>)> {
        (0..4)
            .map(|i| (SWEEP_COLUMNS[i], self.correlation[i][4]))
            .collect()
    }

    pub fn rows_csv(&self) -> String {
        let mut out = String::from("patch_len,stride,pred_len,sample_count,positives,positive_ratio\n");
        for r in &self.rows {
            let ratio = r.positive_ratio.map(|v| format!("{v}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.patch_len, r.stride, r.pred_len, r.sample_count, r.positives, ratio
            ));
        }
        out
    }

    pub fn correlation_csv(&self) -> String {
        let mut out = format!("column,{}\n", SWEEP_COLUMNS.join(","));
        for (name, row) in SWEEP_COLUMNS.iter().zip(&self.correlation) {
            let cells: Vec<String> = row
                .iter()
                .map(|c| c.map(|v| format!("{v}")).unwrap_or_default())
                .collect();
            out.push_str(&format!("{name},{}\n", cells.join(",")));
        }
        out
    }
}

/// Pearson correlation; `None` if either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 2 || n != y.len() {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Counts windows and positives for every grid configuration, in grid order.
pub fn sweep_imbalance(
    curves: &[LightCurve],
    catalog: &FlareCatalog,
    grid: &[PatchConfig],
) -> Result<SweepReport> {
    if grid.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    if curves.is_empty() {
        return Err(Error::Validation("sweep corpus is empty".into()));
    }
    for cfg in grid {
        cfg.validate_geometry()?;
    }
    let prepared: Vec<(&[f64], Vec<f64>)> = curves
        .iter()
        .map(|c| {
            let times = flare_times_for(c, catalog.for_curve(&c.star_id, &c.quarter));
            (c.timestamps.as_slice(), times)
        })
        .collect();

    let rows: Vec<SweepRow> = grid
        .iter()
        .map(|cfg| {
            let (mut total, mut pos) = (0usize, 0usize);
            for (ts, flares) in &prepared {
                for (_, label) in labeled_starts(ts, flares, cfg) {
                    total += 1;
                    pos += usize::from(label);
                }
            }
            SweepRow {
                patch_len: cfg.patch_len,
                stride: cfg.stride,
                pred_len: cfg.pred_len,
                sample_count: total,
                positives: pos,
                positive_ratio: (total > 0).then(|| pos as f64 / total as f64),
            }
        })
        .collect();

    let usable: Vec<&SweepRow> = rows.iter().filter(|r| r.positive_ratio.is_some()).collect();
    let columns: Vec<Vec<f64>> = vec![
        usable.iter().map(|r| r.patch_len as f64).collect(),
        usable.iter().map(|r| r.stride as f64).collect(),
        usable.iter().map(|r| r.pred_len as f64).collect(),
        usable.iter().map(|r| r.sample_count as f64).collect(),
        usable.iter().map(|r| r.positive_ratio.unwrap()).collect(),
    ];
    let correlation = columns
        .iter()
        .map(|a| columns.iter().map(|b| pearson(a, b)).collect())
        .collect();
    Ok(SweepReport { rows, correlation })
}

/// Cartesian product in `patch_len`, `stride`, `pred_len` order.
pub fn grid(
    patch_lens: &[usize],
    strides: &[usize],
    pred_lens: &[usize],
    token_len: usize,
) -> Vec<PatchConfig> {
    let mut out = Vec::new();
    for &patch_len in patch_lens {
        for &stride in strides {
            for &pred_len in pred_lens {
                out.push(PatchConfig {
                    patch_len,
                    stride,
                    pred_len,
                    token_len,
                });
            }
        }
    }
    out
}
