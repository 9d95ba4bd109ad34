use std::path::{Path, PathBuf};

use serde::Serialize;
use stellarf::checkpoint::{self, config_hash};
use stellarf::config::{Precision, RunConfig, SweepGrid};
use stellarf::dataset::{self, content_hash, load_corpus, Dataset};
use stellarf::pipeline::{self, RunManifest};
use stellarf::plot::{correlation_heatmap_svg, imbalance_svg};
use stellarf::synth::generate;
use stellarf::text_encoder::TextEncoder;
use stellarf::trainer::{history_csv, split_dataset};
use stellarf::windowing::sweep_imbalance;
use stellarf::{Error, Result, Scalar};

use crate::Common;

pub fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    if let Some(c) = &common.curves {
        cfg.curves_dir = c.clone();
    }
    if let Some(c) = &common.catalog {
        cfg.catalog = c.clone();
    }
    if let Some(d) = &common.dataset {
        cfg.dataset_dir = Some(d.clone());
    }
    if let Some(v) = common.patch_len {
        cfg.patch.patch_len = v;
    }
    if let Some(v) = common.stride {
        cfg.patch.stride = v;
    }
    if let Some(v) = common.pred_len {
        cfg.patch.pred_len = v;
    }
    cfg.train.use_fhrs &= !common.no_fhrs;
    cfg.train.use_fsin &= !common.no_fsin;
    cfg.train.use_lora &= !common.no_lora;
    cfg.train.use_adapter &= !common.no_adapter;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct OutputFile {
    file: String,
    hash: String,
}

#[derive(Serialize)]
struct CommandManifest<'a> {
    command: &'a str,
    seed: u64,
    config_hash: String,
    config: &'a RunConfig,
    outputs: Vec<OutputFile>,
    #[serde(skip_serializing_if = "Option::is_none")]
    run: Option<RunManifest>,
}

/// Writes each file under `dir` and a `<command>.manifest.json` listing them.
fn emit(cfg: &RunConfig, dir: &Path, command: &str, files: &[(&str, Vec<u8>)], run: Option<RunManifest>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut outputs = Vec::new();
    for (name, bytes) in files {
        std::fs::write(dir.join(name), bytes)?;
        outputs.push(OutputFile {
            file: name.to_string(),
            hash: content_hash(bytes),
        });
    }
    let manifest = CommandManifest {
        command,
        seed: cfg.train.seed,
        config_hash: content_hash(&serde_json::to_vec(cfg)?),
        config: cfg,
        outputs,
        run,
    };
    let json = serde_json::to_string_pretty(&manifest)? + "\n";
    std::fs::write(dir.join(format!("{command}.manifest.json")), json)?;
    Ok(())
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let corpus = generate(&cfg.synth)?;
    corpus.write(&cfg.out_dir)?;
    let injections = serde_json::to_vec_pretty(&corpus.injections)?;
    emit(cfg, &cfg.out_dir, "synth", &[("injections.json", injections)], None)?;
    println!(
        "wrote {} curves and {} flares to {}",
        corpus.curves.len(),
        corpus.catalog.len(),
        cfg.out_dir.display()
    );
    Ok(())
}

pub fn build_dataset(cfg: &RunConfig) -> Result<()> {
    let corpus = load_corpus(&cfg.curves_dir, &cfg.catalog)?;
    let ds = dataset::build_dataset(&corpus, &cfg.patch)?;
    let dir = cfg.dataset_dir();
    ds.write(&dir)?;
    emit(cfg, &dir, "build-dataset", &[], None)?;
    let s = &ds.manifest.summary;
    println!(
        "{} samples from {} curves, {} positive ({})",
        s.samples,
        s.curves,
        s.positives,
        s.positive_ratio.map_or("n/a".into(), |r| format!("{r:.4}"))
    );
    Ok(())
}

pub fn sweep(cfg: &RunConfig, common: &Common) -> Result<()> {
    let corpus = load_corpus(&cfg.curves_dir, &cfg.catalog)?;
    // explicit window flags pin that axis of the grid
    let grid = SweepGrid {
        patch_lens: common.patch_len.map_or(cfg.sweep.patch_lens.clone(), |v| vec![v]),
        strides: common.stride.map_or(cfg.sweep.strides.clone(), |v| vec![v]),
        pred_lens: common.pred_len.map_or(cfg.sweep.pred_lens.clone(), |v| vec![v]),
    };
    let report = sweep_imbalance(&corpus.curves, &corpus.catalog, &grid.configs(cfg.patch.token_len))?;
    let mut files = vec![
        ("sweep.csv", report.rows_csv().into_bytes()),
        ("correlation.csv", report.correlation_csv().into_bytes()),
    ];
    if cfg.plot_heatmap {
        files.push(("correlation.svg", correlation_heatmap_svg(&report).into_bytes()));
    }
    if cfg.plot_imbalance {
        files.push(("imbalance.svg", imbalance_svg(&report).into_bytes()));
    }
    emit(cfg, &cfg.out_dir, "sweep", &files, None)?;
    println!("{} configurations written to {}", report.rows.len(), cfg.out_dir.display());
    Ok(())
}

fn read_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let ds = Dataset::read(&cfg.dataset_dir())?;
    if ds.manifest.patch != cfg.patch {
        return Err(Error::Config(format!(
            "dataset was built with {:?}, configuration asks for {:?}",
            ds.manifest.patch, cfg.patch
        )));
    }
    Ok(ds)
}

fn prepared<T: Scalar>(cfg: &RunConfig, ds: &Dataset) -> Result<dataset::PreparedDataset<T>> {
    let text = TextEncoder::<T>::new(cfg.text)?;
    dataset::prepare(ds, &text)
}

fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("checkpoint.json")
}

fn train_as<T: Scalar>(cfg: &RunConfig) -> Result<()> {
    let ds = read_dataset(cfg)?;
    let data = prepared::<T>(cfg, &ds)?;
    let out = pipeline::train_and_evaluate(&data, cfg.model, &cfg.train)?;
    let ckpt = checkpoint::to_json(&out.model)?.into_bytes();
    let mut run = RunManifest::for_model("train", &out.model);
    run.checkpoint_hash = Some(content_hash(&ckpt));
    run.report = Some(out.report.clone());
    let files = [
        ("checkpoint.json", ckpt),
        ("history.csv", history_csv(&out.model.history).into_bytes()),
        ("run_manifest.json", run.to_json()?.into_bytes()),
        ("eval_report.json", (serde_json::to_string_pretty(&out.report)? + "\n").into_bytes()),
    ];
    emit(cfg, &cfg.out_dir, "train", &files, None)?;
    println!(
        "trained {} epochs (best {}), trainable {:.2}% of parameters; test Acc {:.4}",
        out.model.history.len(),
        out.model.best_epoch,
        100.0 * out.model.audit.fraction,
        out.report.acc
    );
    Ok(())
}

fn evaluate_as<T: Scalar>(cfg: &RunConfig, path: &Path) -> Result<()> {
    let ds = read_dataset(cfg)?;
    let expected = config_hash(&cfg.model, &cfg.train, &cfg.patch, &cfg.text);
    let model = checkpoint::load::<T>(path, Some(&expected))?;
    let data = prepared::<T>(cfg, &ds)?;
    if data.text_digest != model.text_digest {
        return Err(Error::Config("text encoder weights differ from the checkpoint's".into()));
    }
    let splits = split_dataset(&data, &model.train_config.split, model.train_config.seed)?;
    let report = splits.test.evaluate(&model, &data)?;
    let mut csv = format!("{}\n", stellarf::metrics::TABLE_HEADER);
    csv.push_str(&report.csv_row());
    csv.push('\n');
    let files = [
        ("eval_report.json", (serde_json::to_string_pretty(&report)? + "\n").into_bytes()),
        ("eval_report.csv", csv.into_bytes()),
    ];
    emit(cfg, &cfg.out_dir, "evaluate", &files, None)?;
    println!("{}\n{}", stellarf::metrics::TABLE_HEADER, report.csv_row());
    Ok(())
}

fn ablate_as<T: Scalar>(cfg: &RunConfig) -> Result<()> {
    let ds = read_dataset(cfg)?;
    let data = prepared::<T>(cfg, &ds)?;
    let table = pipeline::ablate(&data, cfg.model, &cfg.train)?;
    let files = [
        ("ablation.csv", table.csv().into_bytes()),
        ("ablation.txt", table.text().into_bytes()),
        ("ablation.json", (serde_json::to_string_pretty(&table)? + "\n").into_bytes()),
    ];
    emit(cfg, &cfg.out_dir, "ablate", &files, None)?;
    print!("{}", table.text());
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    match cfg.precision {
        Precision::F64 => train_as::<f64>(cfg),
        Precision::F32 => train_as::<f32>(cfg),
    }
}

pub fn evaluate(cfg: &RunConfig, checkpoint: Option<PathBuf>) -> Result<()> {
    let path = checkpoint.unwrap_or_else(|| checkpoint_path(cfg));
    match cfg.precision {
        Precision::F64 => evaluate_as::<f64>(cfg, &path),
        Precision::F32 => evaluate_as::<f32>(cfg, &path),
    }
}

pub fn ablate(cfg: &RunConfig) -> Result<()> {
    match cfg.precision {
        Precision::F64 => ablate_as::<f64>(cfg),
        Precision::F32 => ablate_as::<f32>(cfg),
    }
}
