//! `stellarf` command-line interface.
//!
//! Exit codes: 0 on success, 2 for input or configuration errors, 3 for
//! numerical failures during training.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "stellarf", version, about = "Flare forecasting from light curves and flare-history prompts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Directory of `<star>_<quarter>.csv` light curves.
    #[arg(long, global = true)]
    pub curves: Option<PathBuf>,
    #[arg(long, global = true)]
    pub catalog: Option<PathBuf>,
    /// Dataset directory (default `<out>/dataset`).
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    pub patch_len: Option<usize>,
    #[arg(long, global = true)]
    pub stride: Option<usize>,
    #[arg(long, global = true)]
    pub pred_len: Option<usize>,
    #[arg(long, global = true)]
    pub no_fhrs: bool,
    #[arg(long, global = true)]
    pub no_fsin: bool,
    #[arg(long, global = true)]
    pub no_lora: bool,
    #[arg(long, global = true)]
    pub no_adapter: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus: `<out>/curves/*.csv` and `<out>/catalog.csv`.
    Synth,
    /// Window the corpus into `<dataset>/manifest.json` and `samples.bin`.
    BuildDataset,
    /// Class balance over the configured window grid.
    Sweep,
    /// Train on the dataset and write a checkpoint.
    Train,
    /// Evaluate a checkpoint on its held-out stars.
    Evaluate {
        /// Default `<out>/checkpoint.json`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train the full model and its four single-component ablations.
    Ablate,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = commands::load_config(&cli.common).and_then(|cfg| match cli.command {
        Command::Synth => commands::synth(&cfg),
        Command::BuildDataset => commands::build_dataset(&cfg),
        Command::Sweep => commands::sweep(&cfg, &cli.common),
        Command::Train => commands::train(&cfg),
        Command::Evaluate { checkpoint } => commands::evaluate(&cfg, checkpoint),
        Command::Ablate => commands::ablate(&cfg),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
