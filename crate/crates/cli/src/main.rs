//! `bridgemem`: generate data, train, evaluate, analyse, ablate and check
//! gradients.
//!
//! Exit codes: 0 success, 2 invalid input or configuration, 3 numeric
//! failure (non-finite loss, failed gradient check), 4 I/O or file-format
//! failure, including refusal to overwrite without `--force`.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bridgemem::Error;

#[derive(Parser)]
#[command(name = "bridgemem", version, about = "Associative bridging between modality memories")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// TOML run configuration; missing keys take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed of the command.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long)]
    pub force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train and test dataset files.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model and write a checkpoint plus per-epoch metrics.
    Train(commands::TrainArgs),
    /// Evaluate a checkpoint on a test set.
    Eval(commands::EvalArgs),
    /// Compare source addressing between same-class and cross-class pairs.
    Analyze(commands::AnalyzeArgs),
    /// Train and evaluate one model per slot count and seed.
    Ablate(commands::AblateArgs),
    /// Check every analytic gradient against central differences.
    Gradcheck(commands::GradcheckArgs),
}

pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;
pub const EXIT_IO: u8 = 4;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite { .. } | Error::GradCheck { .. } | Error::MissingGradient(_) => EXIT_NUMERIC,
        Error::Io(_) | Error::Format { .. } | Error::Version { .. } | Error::Checksum { .. } => EXIT_IO,
        Error::Ablation { source, .. } => exit_code(source),
        _ => EXIT_VALIDATION,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { common } => commands::gen_data(&common),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Analyze(a) => commands::analyze(&a),
        Command::Ablate(a) => commands::ablate(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
