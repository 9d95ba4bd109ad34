use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = "\
# small run for integration tests
synth_stars = 24
synth_curve_len = 1088
max_epochs = 3
layers = 1
heads = 2
d_model = 32
d_ffn = 64
lora_rank = 2
adapter_dim = 4
head_hidden = 8
text_layers = 1
text_heads = 2
text_d_model = 64
text_d_ffn = 64
sweep_pred_lens = 96,288,480
";

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Workspace {
    fn new(extra: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("run.cfg");
        std::fs::write(&config, format!("{SMALL}{extra}")).unwrap();
        Self { _dir: dir, root, config }
    }

    fn run(&self, args: &[&str]) -> Output {
        let out = self.root.join("out");
        Command::new(env!("CARGO_BIN_EXE_stellarf"))
            .args(args)
            .arg("--config")
            .arg(&self.config)
            .arg("--out")
            .arg(&out)
            .arg("--curves")
            .arg(out.join("curves"))
            .arg("--catalog")
            .arg(out.join("catalog.csv"))
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let o = self.run(args);
        assert!(
            o.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        String::from_utf8(o.stdout).unwrap()
    }

    fn out(&self, name: &str) -> PathBuf {
        self.root.join("out").join(name)
    }

    fn read(&self, name: &str) -> Vec<u8> {
        std::fs::read(self.out(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
    }
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn full_pipeline_is_reproducible() {
    let ws = Workspace::new("");
    ws.ok(&["synth"]);
    assert!(ws.out("catalog.csv").is_file());
    assert_eq!(std::fs::read_dir(ws.out("curves")).unwrap().count(), 24);
    ws.ok(&["build-dataset"]);
    assert!(ws.out("dataset/manifest.json").is_file());
    assert!(ws.out("dataset/samples.bin").is_file());

    let stdout = ws.ok(&["train"]);
    assert!(stdout.contains("trainable"), "{stdout}");
    let files = ["checkpoint.json", "history.csv", "run_manifest.json", "eval_report.json", "train.manifest.json"];
    let first: Vec<Vec<u8>> = files.iter().map(|f| ws.read(f)).collect();

    let run = json(&ws.out("run_manifest.json"));
    let fraction = run["audit"]["fraction"].as_f64().unwrap();
    assert!(fraction > 0.0 && fraction < 1.0);
    assert_eq!(ws.read("history.csv").iter().filter(|&&b| b == b'\n').count(), 1 + run["epochs"].as_u64().unwrap() as usize);

    ws.ok(&["evaluate"]);
    let eval = ws.read("eval_report.json");
    assert_eq!(eval, first[3], "evaluate reproduces the training-time report");
    let csv = String::from_utf8(ws.read("eval_report.csv")).unwrap();
    assert!(csv.starts_with("Acc,W-F1,W-Rec,W-Pre,AUC,AUPRC\n"), "{csv}");

    ws.ok(&["train"]);
    for (f, bytes) in files.iter().zip(&first) {
        assert_eq!(&ws.read(f), bytes, "{f} differs between runs");
    }
}

#[test]
fn evaluate_rejects_a_different_config() {
    let ws = Workspace::new("");
    ws.ok(&["synth"]);
    ws.ok(&["build-dataset"]);
    ws.ok(&["train"]);
    let o = ws.run(&["evaluate", "--seed", "7"]);
    assert_eq!(o.status.code(), Some(2));
    let o = ws.run(&["evaluate", "--checkpoint", "/nonexistent/ckpt.json"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn ablate_emits_five_rows() {
    let ws = Workspace::new("");
    ws.ok(&["synth"]);
    ws.ok(&["build-dataset"]);
    ws.ok(&["ablate"]);
    let csv = String::from_utf8(ws.read("ablation.csv")).unwrap();
    let labels: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels, ["full", "w/o FHRs", "w/o FSIn", "w/o LoRA", "w/o Adapter"]);
    let text = String::from_utf8(ws.read("ablation.txt")).unwrap();
    assert_eq!(text.lines().count(), 6);
    assert_eq!(json(&ws.out("ablation.json"))["rows"].as_array().unwrap().len(), 5);
}

#[test]
fn sweep_agrees_with_build_dataset() {
    let ws = Workspace::new("");
    ws.ok(&["synth"]);
    ws.ok(&["sweep"]);
    let rows = String::from_utf8(ws.read("sweep.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 2 * 2 * 3);
    assert!(ws.out("correlation.csv").is_file());
    assert!(String::from_utf8(ws.read("correlation.svg")).unwrap().starts_with("<svg"));
    assert!(String::from_utf8(ws.read("imbalance.svg")).unwrap().starts_with("<svg"));

    ws.ok(&["sweep", "--patch-len", "512", "--stride", "48", "--pred-len", "480"]);
    let single = String::from_utf8(ws.read("sweep.csv")).unwrap();
    let cells: Vec<&str> = single.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(single.lines().count(), 2);

    ws.ok(&["build-dataset", "--patch-len", "512", "--stride", "48", "--pred-len", "480"]);
    let summary = &json(&ws.out("dataset/manifest.json"))["summary"];
    assert_eq!(cells[3], summary["samples"].to_string());
    assert_eq!(cells[4], summary["positives"].to_string());
}

#[test]
fn bad_inputs_exit_with_code_two() {
    let ws = Workspace::new("token_len = 48\n");
    let o = ws.run(&["synth"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("token_len"));

    let ws = Workspace::new("sweep_strides = 48,x\n");
    assert_eq!(ws.run(&["sweep"]).status.code(), Some(2));

    let ws = Workspace::new("no_such_key = 1\n");
    assert_eq!(ws.run(&["synth"]).status.code(), Some(2));

    let ws = Workspace::new("");
    assert_eq!(ws.run(&["train"]).status.code(), Some(2), "no dataset yet");
    assert_eq!(ws.run(&["build-dataset"]).status.code(), Some(2), "no corpus yet");
}
