//! Training runs, held-out evaluation, the ablation table and run manifests.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::checkpoint::model_config_hash;
use crate::dataset::PreparedDataset;
use crate::error::Result;
use crate::metrics::{EvalReport, TABLE_HEADER};
use crate::model::{ModelConfig, ParamAudit};
use crate::scalar::Scalar;
use crate::trainer::{split_dataset, train, TrainConfig, TrainedModel};

pub struct RunOutcome<T> {
    pub model: TrainedModel<T>,
    pub report: EvalReport,
}

/// Splits by star under `cfg.seed`, trains, then evaluates on the test split.
pub fn train_and_evaluate<T: Scalar>(
    data: &PreparedDataset<T>,
    model_config: ModelConfig,
    cfg: &TrainConfig,
) -> Result<RunOutcome<T>> {
    let splits = split_dataset(data, &cfg.split, cfg.seed)?;
    let model = train(data, &splits, model_config, cfg)?;
    let report = splits.test.evaluate(&model, data)?;
    Ok(RunOutcome { model, report })
}

pub const ABLATION_LABELS: [&str; 5] = ["full", "w/o FHRs", "w/o FSIn", "w/o LoRA", "w/o Adapter"];

/// The full configuration and one variant per removed component.
pub fn ablation_configs(base: &TrainConfig) -> Vec<(&'static str, TrainConfig)> {
    let full = TrainConfig {
        use_fhrs: true,
        use_fsin: true,
        use_lora: true,
        use_adapter: true,
        ..*base
    };
    vec![
        (ABLATION_LABELS[0], full),
        (ABLATION_LABELS[1], TrainConfig { use_fhrs: false, ..full }),
        (ABLATION_LABELS[2], TrainConfig { use_fsin: false, ..full }),
        (ABLATION_LABELS[3], TrainConfig { use_lora: false, ..full }),
        (ABLATION_LABELS[4], TrainConfig { use_adapter: false, ..full }),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub report: EvalReport,
    pub audit: ParamAudit,
    pub best_epoch: usize,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn csv(&self) -> String {
        let mut s = format!("model,{TABLE_HEADER}\n");
        for r in &self.rows {
            writeln!(s, "{},{}", r.label, r.report.csv_row()).unwrap();
        }
        s
    }

    /// Fixed-width table with percentages.
    pub fn text(&self) -> String {
        let cols = ["Acc", "W-F1", "W-Rec", "W-Pre", "AUC", "AUPRC"];
        let mut s = format!("{:<12}", "Model");
        for c in cols {
            write!(s, "{c:>8}").unwrap();
        }
        s.push('\n');
        for r in &self.rows {
            write!(s, "{:<12}", r.label).unwrap();
            let e = &r.report;
            for v in [Some(e.acc), Some(e.w_f1), Some(e.w_rec), Some(e.w_pre), e.auc, e.auprc] {
                match v {
                    Some(v) => write!(s, "{:>8.2}", 100.0 * v).unwrap(),
                    None => write!(s, "{:>8}", "-").unwrap(),
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Trains every ablation variant on the same splits and seed.
pub fn ablate<T: Scalar>(
    data: &PreparedDataset<T>,
    model_config: ModelConfig,
    base: &TrainConfig,
) -> Result<AblationTable> {
    let splits = split_dataset(data, &base.split, base.seed)?;
    let mut rows = Vec::new();
    for (label, cfg) in ablation_configs(base) {
        let model = train(data, &splits, model_config, &cfg)?;
        rows.push(AblationRow {
            label: label.to_string(),
            report: splits.test.evaluate(&model, data)?,
            audit: model.audit,
            best_epoch: model.best_epoch,
            epochs: model.history.len(),
        });
    }
    Ok(AblationTable { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub train_config: TrainConfig,
    pub model_config: ModelConfig,
    pub dataset_hash: String,
    /// Git-style hash of the checkpoint bytes, when one was written.
    pub checkpoint_hash: Option<String>,
    pub audit: ParamAudit,
    pub audit_with_text: ParamAudit,
    pub best_epoch: usize,
    pub epochs: usize,
    pub report: Option<EvalReport>,
}

impl RunManifest {
    pub fn for_model<T: Scalar>(command: &str, m: &TrainedModel<T>) -> Self {
        Self {
            command: command.to_string(),
            seed: m.train_config.seed,
            config_hash: model_config_hash(m),
            train_config: m.train_config,
            model_config: m.model_config,
            dataset_hash: m.dataset_hash.clone(),
            checkpoint_hash: None,
            audit: m.audit,
            audit_with_text: m.audit_with_text,
            best_epoch: m.best_epoch,
            epochs: m.history.len(),
            report: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn five_ablation_rows() {
        let rows = ablation_configs(&TrainConfig::default());
        let labels: Vec<&str> = rows.iter().map(|r| r.0).collect();
        assert_eq!(labels, ABLATION_LABELS);
        assert!(!rows[1].1.use_fhrs && rows[1].1.use_fsin);
        assert!(!rows[2].1.use_fsin && rows[2].1.use_fhrs);
        assert!(!rows[3].1.use_lora && rows[3].1.use_adapter);
        assert!(!rows[4].1.use_adapter && rows[4].1.use_lora);
    }
}
