use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use exolam::{commands, exit, CliError};

#[derive(Parser)]
#[command(name = "exolam", version, about = "Latent action experiments under exogenous noise")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate one replicate's dataset into a binary container.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Master seed (overrides EXOLAM_SEED and the config).
        #[arg(long)]
        seed: Option<u64>,
        /// Replicate seed; defaults to the first entry of `seeds`.
        #[arg(long)]
        replicate: Option<u64>,
    },
    /// Train every replicate of a config and append results to a store.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Results store directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Pre-generated linear dataset to train on instead of generating inline.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run a sweep spec over a bounded worker pool.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Suppress per-job progress lines on stderr.
        #[arg(long)]
        quiet: bool,
    },
    /// Run every oracle check for a linear config.
    Verify {
        #[arg(long)]
        config: PathBuf,
        /// Where to write the JSON bundle.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Rebuild a figure's trend table and plot from a results store.
    Report {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        figure: String,
        /// Output directory; defaults to `<store>/reports`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn dispatch(cli: Cli) -> Result<i32, CliError> {
    let mut out = std::io::stdout().lock();
    match cli.cmd {
        Cmd::Gen { config, out: path, seed, replicate } => commands::gen(&config, &path, seed, replicate, &mut out),
        Cmd::Train { config, out: store, seed, data, resume } => commands::train(
            commands::TrainArgs { config: &config, store: &store, seed, data: data.as_deref(), resume: resume.as_deref() },
            &mut out,
        ),
        Cmd::Sweep { config, out: store, jobs, seed, quiet } => commands::sweep(&config, &store, jobs, seed, !quiet, &mut out),
        Cmd::Verify { config, out: json, seed } => commands::verify(&config, json.as_deref(), seed, &mut out),
        Cmd::Report { store, figure, out: dir } => commands::report(&store, &figure, dir, &mut out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE as u8 } else { exit::OK as u8 });
        }
    };
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("exolam: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
