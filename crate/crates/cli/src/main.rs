//! `vamp-pcd`: train unfolded VAMP networks and run detection studies.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vamp_pcd::Exec;

use commands::Ctx;
use config::{ConfigError, ExperimentConfig};

#[derive(Parser, Debug)]
#[command(name = "vamp-pcd", version, about)]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true, default_value = "configs/small.toml")]
    config: PathBuf,
    /// Master seed; overrides `run.master_seed` (and `unfold.seed` for `train`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory; overrides `run.out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Learn the per-layer parameters and write the parameter file.
    Train {
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Monte Carlo ROC for the pcd, oracle-bound and vamp-variance thresholds.
    Roc {
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Achieved against preset false-alarm rate for the PCD threshold.
    PfaControl {
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Residual ECDF differences under each normalizer.
    Ecdf {
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Fixed-point iteration of the variance update and its pfa0 window.
    Theory,
    /// Detect targets in a measurement file (`index,re,im`).
    Detect {
        #[arg(long)]
        measurement: PathBuf,
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Draw one scene and its measurement from the `[scene]` section.
    GenMeasurement,
}

enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = ExperimentConfig::load(&cli.config).map_err(|e| Failure::Config(e.into()))?;
    if let Some(seed) = cli.seed {
        cfg.run.master_seed = seed;
        if matches!(cli.command, Command::Train { .. }) {
            cfg.unfold.seed = seed;
        }
    }
    if let Some(w) = cli.workers {
        cfg.run.workers = Some(w);
    }
    if let Some(out) = cli.out {
        cfg.run.out = out;
    }
    cfg.validate().map_err(|e| Failure::Config(e.into()))?;

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = cfg.run.workers {
        pool = pool.num_threads(w);
    }
    let pool = pool.build().map_err(|e| Failure::Runtime(e.into()))?;

    let params = match &cli.command {
        Command::Train { params }
        | Command::Roc { params }
        | Command::PfaControl { params }
        | Command::Ecdf { params }
        | Command::Detect { params, .. } => params.clone(),
        Command::Theory | Command::GenMeasurement => None,
    };
    let ctx = Ctx {
        cfg,
        exec: Exec::Parallel,
        params,
    };
    let result = pool.install(|| match &cli.command {
        Command::Train { .. } => commands::train(&ctx),
        Command::Roc { .. } => commands::roc(&ctx),
        Command::PfaControl { .. } => commands::pfa_control(&ctx),
        Command::Ecdf { .. } => commands::ecdf(&ctx),
        Command::Theory => commands::theory(&ctx),
        Command::Detect { measurement, .. } => commands::detect(&ctx, measurement),
        Command::GenMeasurement => commands::gen_measurement(&ctx),
    });
    result.map_err(|e| {
        if e.chain().any(|c| c.is::<ConfigError>()) {
            Failure::Config(e)
        } else {
            Failure::Runtime(e)
        }
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
