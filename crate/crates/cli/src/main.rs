//! `act`: runs one pipeline stage from a config file.
//!
//! Exit status is 0 on success, 2 when the config (or the command line) is
//! invalid, 3 when reading or writing a file fails, and 1 otherwise.

use std::path::PathBuf;
use std::process::ExitCode;

use act_core::pipeline::{Command, RunConfig};
use act_core::Error;
use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "act", version, about = "Point-cloud teacher and student training")]
struct Cli {
    #[command(subcommand)]
    command: Stage,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// Run configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides `[run] seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; for gen-data this is where the dataset goes.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Stage {
    /// Write the synthetic shape dataset and its split manifests.
    GenData(Common),
    /// Stage I: train the prompt-tuned dVAE teacher.
    TrainDvae(Common),
    /// Stage II: masked modeling of the teacher's features.
    TrainMpm(Common),
    /// Classification probe on a student's global features.
    Probe(Common),
    /// Reconstruction metrics of a teacher on the test split.
    EvalRecon(Common),
    /// Per-cloud features of a checkpoint as CSV.
    ExportFeatures(Common),
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Io { .. } | Error::Checkpoint(_) | Error::Data(_) => 3,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<String, Error> {
    let (command, common) = match cli.command {
        Stage::GenData(c) => (Command::GenData, c),
        Stage::TrainDvae(c) => (Command::TrainDvae, c),
        Stage::TrainMpm(c) => (Command::TrainMpm, c),
        Stage::Probe(c) => (Command::Probe, c),
        Stage::EvalRecon(c) => (Command::EvalRecon, c),
        Stage::ExportFeatures(c) => (Command::ExportFeatures, c),
    };
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = common.out {
        if command == Command::GenData {
            cfg.data.dir = out;
        } else {
            cfg.out = out;
        }
    }
    Ok(command.run(&cfg)?.stdout)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(stdout) => {
            print!("{stdout}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
