//! Prompt text for the two context modules: the flare eruption record up to a
//! cutoff and the macro statistics tuple `(sid, q, n, m)`.
//!
//! Templates are fixed so that tokenization is stable across runs:
//!
//! ```text
//! Star <sid> quarter <q>: flares erupted at days [t1, t2, ...].
//! Star <sid> quarter <q>: no recorded flares.
//! Star <sid> quarter <q>: flare count <n>, median flare flux <m>.
//! Star <sid> quarter <q>: flare count 0, median flare flux unavailable.
//! ```
//!
//! Times carry 3 decimals and the median 4, rounded half-to-even on the exact
//! binary value.

use serde::{Deserialize, Serialize};

use crate::lightcurve::FlareCatalogEntry;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlareHistory {
    pub star_id: String,
    pub quarter: String,
    /// Ascending eruption times, all at or before the cutoff.
    pub times: Vec<f64>,
    pub fluxes: Vec<f64>,
}

impl FlareHistory {
    pub fn empty(star_id: impl Into<String>, quarter: impl Into<String>) -> Self {
        Self {
            star_id: star_id.into(),
            quarter: quarter.into(),
            times: Vec::new(),
            fluxes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last_time(&self) -> Option<f64> {
        self.times.last().copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlareStats {
    pub sid: String,
    pub q: String,
    pub n: usize,
    /// Median peak flux; `0.0` when `n == 0`.
    pub m: f64,
}

impl FlareStats {
    /// False for the empty-history sentinel.
    pub fn has_median(&self) -> bool {
        self.n > 0
    }
}

/// Entries with `flare_time <= cutoff`, ascending. Entries from other curves
/// are ignored.
pub fn extract_history(
    star_id: &str,
    quarter: &str,
    entries: &[FlareCatalogEntry],
    cutoff_time: f64,
) -> FlareHistory {
    let mut picked: Vec<(f64, f64)> = entries
        .iter()
        .filter(|e| e.star_id == star_id && e.quarter == quarter && e.flare_time <= cutoff_time)
        .map(|e| (e.flare_time, e.flare_flux))
        .collect();
    picked.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (times, fluxes) = picked.into_iter().unzip();
    FlareHistory {
        star_id: star_id.to_string(),
        quarter: quarter.to_string(),
        times,
        fluxes,
    }
}

pub fn compute_stats(history: &FlareHistory) -> FlareStats {
    let n = history.fluxes.len();
    let m = if n == 0 {
        0.0
    } else {
        let mut sorted = history.fluxes.clone();
        sorted.sort_by(f64::total_cmp);
        if n % 2 == 1 {
            sorted[n / 2]
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
        }
    };
    FlareStats {
        sid: history.star_id.clone(),
        q: history.quarter.clone(),
        n,
        m,
    }
}

pub fn render_history_prompt(history: &FlareHistory) -> String {
    if history.is_empty() {
        return format!(
            "Star {} quarter {}: no recorded flares.",
            history.star_id, history.quarter
        );
    }
    let days: Vec<String> = history.times.iter().map(|t| format!("{t:.3}")).collect();
    format!(
        "Star {} quarter {}: flares erupted at days [{}].",
        history.star_id,
        history.quarter,
        days.join(", ")
    )
}

pub fn render_stats_prompt(stats: &FlareStats) -> String {
    if stats.has_median() {
        format!(
            "Star {} quarter {}: flare count {}, median flare flux {:.4}.",
            stats.sid, stats.q, stats.n, stats.m
        )
    } else {
        format!(
            "Star {} quarter {}: flare count 0, median flare flux unavailable.",
            stats.sid, stats.q
        )
    }
}
