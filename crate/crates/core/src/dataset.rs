//! Windowed datasets on disk and their model-ready form.
//!
//! A dataset directory holds `manifest.json` (configuration, input hashes,
//! summary and one record per window, with both prompts) and `samples.bin`
//! (the raw window values as little-endian `f64`, record after record).

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flare_context::{render_history_prompt, render_stats_prompt};
use crate::lightcurve::{interpolate_missing, parse_catalog, parse_lightcurve, FlareCatalog, LightCurve};
use crate::linalg::Matrix;
use crate::peft::Parameters;
use crate::scalar::Scalar;
use crate::text_encoder::{TextEncoder, TextEncoderConfig};
use crate::windowing::{hex_digest, partition_windows, standardize_window, tokenize_window, PatchConfig};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SAMPLES_FILE: &str = "samples.bin";
const FORMAT: &str = "stellarf-dataset/1";

/// Git-style content hash: SHA-256 of `blob <len>\0<bytes>`.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut buf = format!("blob {}\0", bytes.len()).into_bytes();
    buf.extend_from_slice(bytes);
    hex_digest(&buf)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputFile {
    pub name: String,
    pub hash: String,
}

/// Curves sorted by file name, gaps interpolated, plus the catalog.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub curves: Vec<LightCurve>,
    pub catalog: FlareCatalog,
    pub inputs: Vec<InputFile>,
}

/// Reads every `*.csv` in `curves_dir` and the catalog file.
pub fn load_corpus(curves_dir: &Path, catalog: &Path) -> Result<Corpus> {
    if !curves_dir.is_dir() {
        return Err(Error::Validation(format!(
            "curve directory {} does not exist",
            curves_dir.display()
        )));
    }
    if !catalog.is_file() {
        return Err(Error::Validation(format!("catalog {} does not exist", catalog.display())));
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(curves_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    let mut curves = Vec::with_capacity(paths.len());
    let mut inputs = Vec::with_capacity(paths.len() + 1);
    for p in &paths {
        curves.push(interpolate_missing(&parse_lightcurve(p)?)?);
        inputs.push(InputFile {
            name: p.file_name().unwrap().to_string_lossy().into_owned(),
            hash: content_hash(&std::fs::read(p)?),
        });
    }
    inputs.push(InputFile {
        name: catalog.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned()),
        hash: content_hash(&std::fs::read(catalog)?),
    });
    Ok(Corpus {
        curves,
        catalog: parse_catalog(catalog)?,
        inputs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub star_id: String,
    pub quarter: String,
    pub start_index: usize,
    pub end_time: f64,
    pub label: bool,
    pub history_prompt: String,
    pub stats_prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub curves: usize,
    pub stars: usize,
    pub samples: usize,
    pub positives: usize,
    pub positive_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub config_hash: String,
    pub patch: PatchConfig,
    pub inputs: Vec<InputFile>,
    pub summary: DatasetSummary,
    pub records: Vec<DatasetRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    /// Raw window values, one vector per record.
    pub values: Vec<Vec<f64>>,
}

pub fn build_dataset(corpus: &Corpus, patch: &PatchConfig) -> Result<Dataset> {
    patch.validate()?;
    let mut records = Vec::new();
    let mut values = Vec::new();
    for curve in &corpus.curves {
        let entries = corpus.catalog.for_curve(&curve.star_id, &curve.quarter);
        for w in partition_windows(curve, entries, patch)? {
            records.push(DatasetRecord {
                star_id: w.star_id,
                quarter: w.quarter,
                start_index: w.start_index,
                end_time: w.end_time,
                label: w.label,
                history_prompt: render_history_prompt(&w.history),
                stats_prompt: render_stats_prompt(&w.stats),
            });
            values.push(w.values);
        }
    }
    let positives = records.iter().filter(|r| r.label).count();
    let stars: BTreeSet<&str> = corpus.curves.iter().map(|c| c.star_id.as_str()).collect();
    let summary = DatasetSummary {
        curves: corpus.curves.len(),
        stars: stars.len(),
        samples: records.len(),
        positives,
        positive_ratio: (!records.is_empty()).then(|| positives as f64 / records.len() as f64),
    };
    Ok(Dataset {
        manifest: DatasetManifest {
            format: FORMAT.into(),
            config_hash: patch.fingerprint(),
            patch: *patch,
            inputs: corpus.inputs.clone(),
            summary,
            records,
        },
        values,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn manifest_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.manifest)? + "\n")
    }

    pub fn samples_bytes(&self) -> Vec<u8> {
        self.values
            .iter()
            .flatten()
            .flat_map(|v| v.to_le_bytes())
            .collect()
    }

    /// Hash over both files' contents.
    pub fn content_hash(&self) -> Result<String> {
        let mut bytes = self.manifest_json()?.into_bytes();
        bytes.extend(self.samples_bytes());
        Ok(content_hash(&bytes))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(MANIFEST_FILE), self.manifest_json()?)?;
        std::fs::write(dir.join(SAMPLES_FILE), self.samples_bytes())?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        if !manifest_path.is_file() {
            return Err(Error::Validation(format!(
                "no dataset at {} (missing {MANIFEST_FILE})",
                dir.display()
            )));
        }
        let manifest: DatasetManifest = serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?;
        if manifest.format != FORMAT {
            return Err(Error::Validation(format!("unknown dataset format {}", manifest.format)));
        }
        if manifest.config_hash != manifest.patch.fingerprint() {
            return Err(Error::Validation("dataset config hash does not match its patch config".into()));
        }
        let bytes = std::fs::read(dir.join(SAMPLES_FILE))?;
        let p = manifest.patch.patch_len;
        if bytes.len() != manifest.records.len() * p * 8 {
            return Err(Error::Validation(format!(
                "{SAMPLES_FILE} holds {} bytes, expected {} records of {p} values",
                bytes.len(),
                manifest.records.len()
            )));
        }
        let values = bytes
            .chunks_exact(p * 8)
            .map(|w| {
                w.chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect()
            })
            .collect();
        Ok(Self { manifest, values })
    }
}

/// A window ready for fusion: standardized tokens and pooled prompt features.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample<T> {
    pub star_id: String,
    pub label: bool,
    pub light: Matrix<T>,
    pub stats: Vec<T>,
    pub history: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct PreparedDataset<T> {
    pub patch: PatchConfig,
    pub patch_hash: String,
    pub text: TextEncoderConfig,
    pub text_digest: String,
    pub dataset_hash: String,
    pub samples: Vec<PreparedSample<T>>,
}

impl<T> PreparedDataset<T> {
    /// Distinct star ids in sorted order.
    pub fn stars(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.samples.iter().map(|s| s.star_id.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }
}

pub fn prepare_window<T: Scalar>(values: &[f64], patch: &PatchConfig) -> Result<Matrix<T>> {
    let z: Vec<T> = standardize_window(values).into_iter().map(T::of).collect();
    tokenize_window(&z, patch.token_len)
}

/// Encodes every distinct prompt once and assembles the prepared samples.
pub fn prepare<T: Scalar>(dataset: &Dataset, text: &TextEncoder<T>) -> Result<PreparedDataset<T>> {
    let patch = dataset.manifest.patch;
    patch.validate()?;
    let mut cache: BTreeMap<&str, Vec<T>> = BTreeMap::new();
    for r in &dataset.manifest.records {
        for prompt in [r.history_prompt.as_str(), r.stats_prompt.as_str()] {
            if !cache.contains_key(prompt) {
                let pooled = text.encode_pooled(&text.tokenize(prompt))?;
                cache.insert(prompt, pooled);
            }
        }
    }
    let samples = dataset
        .manifest
        .records
        .iter()
        .zip(&dataset.values)
        .map(|(r, v)| {
            Ok(PreparedSample {
                star_id: r.star_id.clone(),
                label: r.label,
                light: prepare_window(v, &patch)?,
                stats: cache[r.stats_prompt.as_str()].clone(),
                history: cache[r.history_prompt.as_str()].clone(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(PreparedDataset {
        patch,
        patch_hash: dataset.manifest.config_hash.clone(),
        text: text.config,
        text_digest: text.frozen_digest(),
        dataset_hash: dataset.content_hash()?,
        samples,
    })
}
