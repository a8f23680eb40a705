use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use bmtree_cli::{run, Command, RunConfig};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Cmd {
    Synth,
    Mine,
    Sample,
    Fit,
    Compose,
    Predict,
    Forecast,
    Compare,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Synth => Command::Synth,
            Cmd::Mine => Command::Mine,
            Cmd::Sample => Command::Sample,
            Cmd::Fit => Command::Fit,
            Cmd::Compose => Command::Compose,
            Cmd::Predict => Command::Predict,
            Cmd::Forecast => Command::Forecast,
            Cmd::Compare => Command::Compare,
        }
    }
}

/// Bayesian model trees for discrete choice.
#[derive(Debug, Parser)]
#[command(name = "bmtree", version)]
struct Args {
    #[arg(value_enum)]
    command: Cmd,
    /// TOML run configuration; defaults apply to anything left out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for chains, fits and sweeps.
    #[arg(long)]
    workers: Option<usize>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let config = match &args.config {
        Some(p) => RunConfig::load(p),
        None => {
            let mut c = RunConfig::default();
            c.resolve_paths(std::path::Path::new("."));
            Ok(c)
        }
    };
    let mut config = match config {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(o) = args.out {
        config.out = o;
    }
    if let Some(n) = args.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(3);
        }
    }
    match run(args.command.into(), &config) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
