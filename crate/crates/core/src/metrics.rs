//! Accuracy, support-weighted precision/recall/F1, ROC AUC and step-wise
//! AUPRC for binary labels (`true` = flare).

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Probabilities at or above this count as a positive prediction.
pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_predictions(labels: &[bool], predicted: &[bool]) -> Self {
        let mut c = Self::default();
        for (&y, &p) in labels.iter().zip(predicted) {
            match (y, p) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (true, false) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// `a / b`, with `0 / 0 = 0`.
fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedMetrics {
    pub acc: f64,
    pub w_pre: f64,
    pub w_rec: f64,
    pub w_f1: f64,
    pub confusion: Confusion,
}

/// Per-class precision, recall and F1 averaged with weights `support / total`.
pub fn weighted_metrics(labels: &[bool], predicted: &[bool]) -> Result<WeightedMetrics> {
    if labels.is_empty() {
        return Err(Error::Validation("metrics need at least one sample".into()));
    }
    if labels.len() != predicted.len() {
        return Err(Error::Shape(format!(
            "{} labels vs {} predictions",
            labels.len(),
            predicted.len()
        )));
    }
    let c = Confusion::from_predictions(labels, predicted);
    let n = c.total() as f64;
    let (pos, neg) = (c.tp + c.fn_, c.tn + c.fp);

    let pre_pos = ratio(c.tp, c.tp + c.fp);
    let rec_pos = ratio(c.tp, pos);
    let pre_neg = ratio(c.tn, c.tn + c.fn_);
    let rec_neg = ratio(c.tn, neg);
    let (s_pos, s_neg) = (pos as f64, neg as f64);
    let weighted = |a: f64, b: f64| (s_pos * a + s_neg * b) / n;

    Ok(WeightedMetrics {
        acc: (c.tp + c.tn) as f64 / n,
        w_pre: weighted(pre_pos, pre_neg),
        w_rec: weighted(rec_pos, rec_neg),
        w_f1: weighted(f1(pre_pos, rec_pos), f1(pre_neg, rec_neg)),
        confusion: c,
    })
}

fn check_scores<T: Scalar>(labels: &[bool], scores: &[T]) -> Result<()> {
    if labels.len() != scores.len() {
        return Err(Error::Shape(format!(
            "{} labels vs {} scores",
            labels.len(),
            scores.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Validation("scores contain NaN".into()));
    }
    Ok(())
}

/// Area under the ROC curve as the Mann-Whitney statistic: the fraction of
/// (positive, negative) pairs ranked correctly, ties counting one half.
pub fn auc<T: Scalar>(labels: &[bool], scores: &[T]) -> Result<f64> {
    check_scores(labels, scores)?;
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Validation("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));

    // Sum of (1-based, tie-averaged) ranks of the positives, doubled to stay
    // in integers.
    let mut doubled_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let doubled_avg = (i + 1 + j + 1) as u128;
        let positives = order[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        doubled_rank_sum += doubled_avg * positives;
        i = j + 1;
    }
    let p = n_pos as u128;
    let doubled_u = doubled_rank_sum - p * (p + 1);
    Ok(doubled_u as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// Step-wise area under the precision-recall curve: over descending
/// thresholds, each recall increment is weighted by the precision reached at
/// that threshold. Equal scores enter together.
pub fn auprc<T: Scalar>(labels: &[bool], scores: &[T]) -> Result<f64> {
    check_scores(labels, scores)?;
    let n_pos = labels.iter().filter(|&&y| y).count();
    if n_pos == 0 {
        return Err(Error::Validation("AUPRC needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        for &k in &order[i..=j] {
            if labels[k] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / n_pos as f64;
        area += (recall - prev_recall) * (tp as f64 / (tp + fp) as f64);
        prev_recall = recall;
        i = j + 1;
    }
    Ok(area)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub acc: f64,
    pub w_pre: f64,
    pub w_rec: f64,
    pub w_f1: f64,
    /// `None` when the evaluated set holds a single class.
    pub auc: Option<f64>,
    /// `None` when the evaluated set has no positives.
    pub auprc: Option<f64>,
    pub confusion: Confusion,
    pub support_negative: usize,
    pub support_positive: usize,
}

pub const TABLE_HEADER: &str = "Acc,W-F1,W-Rec,W-Pre,AUC,AUPRC";

impl EvalReport {
    /// Thresholds `probs` at [`DECISION_THRESHOLD`] and computes every metric.
    pub fn from_probabilities<T: Scalar>(labels: &[bool], probs: &[T]) -> Result<Self> {
        check_scores(labels, probs)?;
        let threshold = T::of(DECISION_THRESHOLD);
        let predicted: Vec<bool> = probs.iter().map(|&p| p >= threshold).collect();
        let w = weighted_metrics(labels, &predicted)?;
        let positives = labels.iter().filter(|&&y| y).count();
        Ok(Self {
            acc: w.acc,
            w_pre: w.w_pre,
            w_rec: w.w_rec,
            w_f1: w.w_f1,
            auc: auc(labels, probs).ok(),
            auprc: auprc(labels, probs).ok(),
            confusion: w.confusion,
            support_negative: labels.len() - positives,
            support_positive: positives,
        })
    }

    /// `Acc,W-F1,W-Rec,W-Pre,AUC,AUPRC`; undefined values are empty cells.
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut s = String::new();
        write!(
            s,
            "{:.6},{:.6},{:.6},{:.6},{},{}",
            self.acc,
            self.w_f1,
            self.w_rec,
            self.w_pre,
            opt(self.auc),
            opt(self.auprc)
        )
        .unwrap();
        s
    }
}
