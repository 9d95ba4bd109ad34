//! JSON checkpoints of trained models.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::peft::Parameters;
use crate::scalar::Scalar;
use crate::text_encoder::TextEncoderConfig;
use crate::trainer::{TrainConfig, TrainedModel};
use crate::windowing::{hex_digest, PatchConfig};

const FORMAT: &str = "stellarf-checkpoint/1";

/// Hash of every configuration that shapes a model's inputs and weights.
pub fn config_hash(
    model: &ModelConfig,
    train: &TrainConfig,
    patch: &PatchConfig,
    text: &TextEncoderConfig,
) -> String {
    let json = serde_json::to_vec(&(model, train, patch, text)).expect("configs serialize");
    hex_digest(&json)
}

pub fn model_config_hash<T: Scalar>(m: &TrainedModel<T>) -> String {
    config_hash(&m.model_config, &m.train_config, &m.patch, &m.text)
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct Envelope<T> {
    format: String,
    scalar: String,
    config_hash: String,
    seed: u64,
    model: TrainedModel<T>,
}

pub fn to_json<T: Scalar>(m: &TrainedModel<T>) -> Result<String> {
    let env = Envelope {
        format: FORMAT.into(),
        scalar: T::NAME.into(),
        config_hash: model_config_hash(m),
        seed: m.train_config.seed,
        model: m.clone(),
    };
    Ok(serde_json::to_string(&env)? + "\n")
}

/// Parses a checkpoint, checks its integrity and, when `expected_hash` is
/// given, that it was trained under that configuration.
pub fn from_json<T: Scalar>(text: &str, expected_hash: Option<&str>) -> Result<TrainedModel<T>> {
    let env: Envelope<T> = serde_json::from_str(text)?;
    if env.format != FORMAT {
        return Err(Error::Validation(format!("unknown checkpoint format {}", env.format)));
    }
    if env.scalar != T::NAME {
        return Err(Error::Validation(format!(
            "checkpoint stores {} values, loader expects {}",
            env.scalar,
            T::NAME
        )));
    }
    let m = env.model;
    let actual = model_config_hash(&m);
    if actual != env.config_hash {
        return Err(Error::Validation("checkpoint config hash does not match its contents".into()));
    }
    if let Some(expected) = expected_hash {
        if expected != actual {
            return Err(Error::Config(format!(
                "checkpoint was trained with config {actual}, expected {expected}"
            )));
        }
    }
    if m.classifier.frozen_digest() != m.frozen_digest {
        return Err(Error::Validation("checkpoint frozen tensors are corrupted".into()));
    }
    Ok(m)
}

pub fn save<T: Scalar>(m: &TrainedModel<T>, path: &Path) -> Result<()> {
    std::fs::write(path, to_json(m)?)?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path, expected_hash: Option<&str>) -> Result<TrainedModel<T>> {
    if !path.is_file() {
        return Err(Error::Validation(format!("checkpoint {} does not exist", path.display())));
    }
    from_json(&std::fs::read_to_string(path)?, expected_hash)
}
