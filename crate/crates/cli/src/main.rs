use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Parser, Subcommand};
use qdnn::mode::BitMode;

mod commands;
mod config;
mod failure;

use commands::EvalData;

/// Train, evaluate, switch and inspect quantizable networks.
#[derive(Debug, Parser)]
#[command(name = "qdnn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn parse_mode(s: &str) -> Result<BitMode, String> {
    let bits: u8 = s.parse().map_err(|_| format!("{s:?} is not a bit-width"))?;
    BitMode::new(bits).map_err(|e| e.to_string())
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train from a run config; writes the model, logs and a summary.
    Train { config: PathBuf },
    /// Accuracy and loss of a model file in one bit mode.
    #[command(group(ArgGroup::new("data").required(true).args(["config", "idx", "csv"])))]
    Eval {
        model: PathBuf,
        /// Mode to run (default: the stored bit-width).
        #[arg(long, value_parser = parse_mode)]
        bits: Option<BitMode>,
        /// Use the evaluation split of this run config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// IDX image and label files.
        #[arg(long, num_args = 2, value_names = ["IMAGES", "LABELS"])]
        idx: Option<Vec<PathBuf>>,
        /// CSV file with a `label` column.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Re-quantize a stored model to fewer bits.
    Switch {
        model: PathBuf,
        #[arg(long, value_parser = parse_mode)]
        to_bits: BitMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Code histograms, threshold tables and byte accounting of a model.
    Inspect {
        model: PathBuf,
        /// Output directory (default: the model path with an `.inspect` extension).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config } => commands::train(&config),
        Command::Eval { model, bits, config, idx, csv, json } => {
            let source = match (config, idx, csv) {
                (Some(c), _, _) => EvalData::Config(c),
                (_, Some(mut pair), _) => {
                    let labels = pair.pop().expect("two values");
                    EvalData::Idx { images: pair.pop().expect("two values"), labels }
                }
                (_, _, Some(path)) => EvalData::Csv(path),
                _ => unreachable!("clap requires one data source"),
            };
            commands::eval(&model, bits, &source, json)
        }
        Command::Switch { model, to_bits, out } => commands::switch(&model, to_bits, &out),
        Command::Inspect { model, out, json } => commands::inspect(&model, out.as_deref(), json),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {failure}");
            ExitCode::from(failure.code)
        }
    }
}
