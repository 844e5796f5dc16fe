mod commands;
mod manifest;
mod sampling;

use clap::{Parser, Subcommand};
use coso::CsError;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(
    name = "coso",
    version,
    about = "Collaborative compressed-sensing sampling, extraction and reconstruction"
)]
pub struct Cli {
    /// Run single-threaded (bit-reproducible outputs).
    #[arg(long, global = true)]
    serial: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Measure an image with a sampling operator.
    Sample(commands::SampleArgs),
    /// Recover an image from a measurement file with PGD.
    Reconstruct(commands::ReconstructArgs),
    /// Probe an operator and write its explicit matrix.
    Extract(commands::ExtractArgs),
    /// RIP, measurement power and receptive fields over an image corpus.
    Analyze(commands::AnalyzeArgs),
    /// Apply AWGN and quantization to a measurement file.
    Channel(commands::ChannelArgs),
    /// Split a matrix file into per-row modulation patterns.
    ExportDmd(commands::ExportDmdArgs),
    /// Write a randomly initialized filtering network.
    InitWeights(commands::InitWeightsArgs),
    /// Re-run the command recorded in a manifest.
    Replay(commands::ReplayArgs),
}

/// 0 success, 2 validation failure, 3 numerical abort.
fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err
        .chain()
        .any(|e| matches!(e.downcast_ref::<CsError>(), Some(CsError::NonFinite(_))));
    if numerical {
        3
    } else {
        2
    }
}

pub fn run(cli: Cli, argv: Vec<String>) -> anyhow::Result<()> {
    if cli.serial {
        // fails only if the pool already exists, e.g. during replay
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    let serial = cli.serial;
    match cli.command {
        Command::Sample(a) => commands::sample(a, &argv),
        Command::Reconstruct(a) => commands::reconstruct(a, &argv),
        Command::Extract(a) => commands::extract(a, serial, &argv),
        Command::Analyze(a) => commands::analyze(a, serial, &argv),
        Command::Channel(a) => commands::channel(a, &argv),
        Command::ExportDmd(a) => commands::export_dmd(a, &argv),
        Command::InitWeights(a) => commands::init_weights(a, &argv),
        Command::Replay(a) => commands::replay(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let cli = Cli::parse();
    match run(cli, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
