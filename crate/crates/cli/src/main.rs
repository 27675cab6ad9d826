//! `adafgrad`: generate synthetic task sequences, train lifelong-learning
//! methods on them and compare the resulting runs.

mod commands;
mod plots;

use std::path::PathBuf;
use std::process::ExitCode;

use adafgrad_core::engine::Method;
use adafgrad_core::Error;
use clap::{Parser, Subcommand};

pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "adafgrad", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic task sequence (slide files, prototypes, manifest).
    Synth {
        /// JSON generator spec; omitted fields take their defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write into a non-empty directory, overwriting files of the same name.
        #[arg(long)]
        force: bool,
    },
    /// Train one method over a manifest's task sequence.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// JSON run config; omitted fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's method.
        #[arg(long, value_parser = parse_method)]
        method: Option<Method>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare finished runs: a CSV table and SVG plots.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the final model's embedding of every test slide as CSV.
    DumpEmbeddings {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn init_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("ADAFGRAD_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .map_err(|_| Error::Config(format!("ADAFGRAD_THREADS must be a positive integer, got {raw:?}")))?;
    if n == 0 {
        return Err(Error::Config("ADAFGRAD_THREADS must be >= 1".into()).into());
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::NonFiniteLoss { .. } | Error::NonFinite(_) | Error::DegenerateGradient(_)) => EXIT_NUMERIC,
        _ => EXIT_VALIDATION,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| match cli.command {
        Command::Synth { spec, out, seed, force } => commands::synth(spec.as_deref(), &out, seed, force),
        Command::Train {
            manifest,
            config,
            method,
            out,
        } => commands::train(&manifest, config.as_deref(), method, &out),
        Command::Report { runs, out } => commands::report(&runs, &out),
        Command::DumpEmbeddings { run, manifest, out } => commands::dump_embeddings(&run, &manifest, &out),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
