use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use owl_core::error::{Error, ErrorKind, Result};

mod commands;

/// Open-world learning on pre-extracted feature vectors.
#[derive(Parser, Debug)]
#[command(name = "owl", version, about)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Root seed; overrides the config's `seed`
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Feature file; overrides the config's `features_path`
    #[arg(long, global = true)]
    pub features: Option<PathBuf>,

    /// Protocol config (TOML)
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Config override, `key=value` with dotted keys (repeatable)
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic Gaussian-class dataset
    Synth(SynthArgs),
    /// Run the protocol described by --config
    Run,
    /// Grid-search EVM dm/ct(/tailsize) on a holdout of the train split
    Sweep(SweepArgs),
    /// Pick the threshold that rejects a target fraction of unknowns
    Calibrate(CalibrateArgs),
    /// Render a report CSV as a text table
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub classes: u32,
    #[arg(long)]
    pub dim: usize,
    /// Train samples per class
    #[arg(long)]
    pub train: usize,
    /// Validation samples per class
    #[arg(long)]
    pub val: usize,
    #[arg(long, default_value_t = 10.0)]
    pub radius: f64,
    #[arg(long, default_value_t = 1.0)]
    pub stddev: f64,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    pub dm: Vec<f64>,
    #[arg(long, value_delimiter = ',', required = true)]
    pub ct: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub tailsize: Vec<usize>,
    /// Fraction of each class's train samples held out for scoring
    #[arg(long, default_value_t = 0.2)]
    pub holdout: f64,
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub target_uda: f64,
    /// Saved model (.owle / .owlp); scored on the unknown classes' val split
    #[arg(long, conflicts_with = "scores")]
    pub model: Option<PathBuf>,
    /// Classes treated as unknown; defaults to every class the model does not know
    #[arg(long, value_delimiter = ',')]
    pub unknown_classes: Vec<u32>,
    /// Plain-text unknown scores, one per line, instead of a model
    #[arg(long)]
    pub scores: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Report CSV; defaults to <out>/report.csv
    pub path: Option<PathBuf>,
}

impl Global {
    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn require_config(&self) -> Result<&Path> {
        self.config
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument("--config is required".into()))
    }
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Usage => 1,
        ErrorKind::Data => 2,
        ErrorKind::Numeric => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Synth(a) => commands::synth(&cli.global, a),
        Command::Run => commands::run(&cli.global),
        Command::Sweep(a) => commands::sweep(&cli.global, a),
        Command::Calibrate(a) => commands::calibrate(&cli.global, a),
        Command::Report(a) => commands::report(&cli.global, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
