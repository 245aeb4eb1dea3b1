//! `melsep`: mapping construction, training, separation and evaluation.
//!
//! Exit codes: 0 success, 2 usage or validation error, 3 numerical failure,
//! 1 anything else (I/O).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use melsep_core::bandmap::MappingMode;

/// Usage or validation failure (exit 2).
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Parser, Debug)]
#[command(name = "melsep", version, about = "Mel-band music source separation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a band mapping and print its summary.
    Mapping(MappingArgs),
    /// Train a model on a dataset folder or a synthetic fixture.
    Train(TrainArgs),
    /// Separate one stem from a WAV file.
    Separate(SeparateArgs),
    /// Score estimate folders against reference folders.
    Evaluate(EvaluateArgs),
    /// Write an untrained checkpoint (debug).
    Init(InitArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Mel,
    Bandsplit,
}

impl From<ModeArg> for MappingMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Mel => MappingMode::MelOverlapping,
            ModeArg::Bandsplit => MappingMode::BandsplitDisjoint,
        }
    }
}

#[derive(Args, Debug)]
struct MappingArgs {
    #[arg(long, default_value_t = 44_100)]
    sr: u32,
    #[arg(long, default_value_t = 2048)]
    fft: usize,
    /// Mel band count (mel mode only).
    #[arg(long, default_value_t = 60)]
    bands: usize,
    #[arg(long, value_enum, default_value = "mel")]
    mode: ModeArg,
    /// Band-split boundaries or widths as JSON; defaults to the 62-band split.
    #[arg(long)]
    boundaries: Option<PathBuf>,
    /// Give uncovered bins to the nearest band.
    #[arg(long)]
    patch_coverage: bool,
    /// Experimental: remove shared bins from a mel mapping (implies --patch-coverage).
    #[arg(long)]
    deduplicate: bool,
    /// Output path; `.csv` writes the band table, anything else JSON.
    #[arg(long, default_value = "mapping.json")]
    out: PathBuf,
}

/// Options shared by commands that read the run config.
#[derive(Args, Debug)]
struct ConfigArgs {
    /// JSON run config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config entry, e.g. `--set train.learning_rate=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    stem: Option<String>,
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args, Debug)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["fixture", "data"])))]
struct TrainArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Seed of the synthetic training track.
    #[arg(long)]
    fixture: Option<u64>,
    /// Dataset root: one folder per track with mixture.wav and <stem>.wav.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    bands: Option<usize>,
    #[arg(long, default_value = "melsep.ckpt")]
    out: PathBuf,
    /// Loss curve CSV; defaults to `<out>.loss.csv`.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    /// Also write the fixture track folder here (with --fixture).
    #[arg(long)]
    write_fixture: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SeparateArgs {
    #[command(flatten)]
    common: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Output folder; the estimate is written to `<out>/<stem>.wav`.
    #[arg(long)]
    out: PathBuf,
    /// Reference WAV of the same stem; prints the SDR of the estimate.
    #[arg(long)]
    reference: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Reference root: one folder per track with <stem>.wav files.
    #[arg(long)]
    reference: PathBuf,
    /// Estimate root with the same layout.
    #[arg(long)]
    estimates: PathBuf,
    /// Stems to score (repeatable); defaults to every reference stem.
    #[arg(long = "score-stem")]
    score_stems: Vec<String>,
    /// Report folder (`sdr_<stem>.json` and `sdr_<stem>.csv`).
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum InitArg {
    /// Zero mask.
    Standard,
    /// Every tensor random.
    Random,
    /// Unit mask: separation returns the input.
    Identity,
}

#[derive(Args, Debug)]
struct InitArgs {
    #[command(flatten)]
    common: ConfigArgs,
    #[arg(long, value_enum, default_value = "identity")]
    init: InitArg,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    match err.downcast_ref::<melsep_core::Error>() {
        Some(e) if e.is_numerical() => 3,
        Some(melsep_core::Error::Io(_)) => 1,
        Some(_) => 2,
        None if err.downcast_ref::<std::io::Error>().is_some() => 1,
        None => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MELSEP_LOG", "info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Mapping(a) => commands::mapping(a),
        Command::Train(a) => commands::train(a),
        Command::Separate(a) => commands::separate(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Init(a) => commands::init(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
