//! `fgno` command-line driver: synthetic data generation, pretraining,
//! grid probing, the clean-versus-noisy ablation, the sampling-rate sweep
//! and report assembly, each driven by one TOML experiment file.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::Method;
pub use config::{DataConfig, ExperimentConfig, ProbeConfig};
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "fgno",
    version,
    about = "Flow-matching pretraining and probing for spectrogram time series"
)]
pub struct Cli {
    /// Global seed; overrides FGNO_SEED and the config file.
    #[arg(long, env = "FGNO_SEED", global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Experiment file.
    #[arg(long, short)]
    pub config: PathBuf,

    /// Which pretrained backbone to use.
    #[arg(long, value_enum, default_value = "fgno")]
    pub method: Method,

    /// Checkpoint directory; defaults to the run's pretrain output.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the configured synthetic dataset to disk.
    GenSynth {
        #[arg(long, short)]
        config: PathBuf,
        /// Target directory; defaults to `<output_dir>/dataset`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain a backbone with flow matching or masked reconstruction.
    Pretrain {
        #[arg(value_enum)]
        method: Method,
        #[arg(long, short)]
        config: PathBuf,
    },
    /// Grid-search layer and flow time with a linear head.
    Probe(RunArgs),
    /// Compare clean and noisy feature extraction at one cell.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Number of noise seeds; overrides `probe.noise_seeds`.
        #[arg(long)]
        noise_seeds: Option<usize>,
    },
    /// Probe at reduced sampling rates.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Downsampling factors; override `probe.factors`.
        #[arg(long, value_delimiter = ',')]
        factors: Option<Vec<usize>>,
    },
    /// Merge the artifacts of finished runs into one directory.
    Report {
        /// Run output directories.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
    },
}

fn load(path: &std::path::Path, seed: Option<u64>) -> CliResult<ExperimentConfig> {
    ExperimentConfig::load(path)?.resolve(seed)
}

/// Runs one parsed command and returns the directory it wrote.
pub fn run(cli: Cli) -> CliResult<PathBuf> {
    let seed = cli.seed;
    match cli.command {
        Command::GenSynth { config, out } => commands::gen_synth(&load(&config, seed)?, out.as_deref()),
        Command::Pretrain { method, config } => commands::pretrain(&load(&config, seed)?, method),
        Command::Probe(run) => commands::probe(&load(&run.config, seed)?, run.method, run.checkpoint.as_deref()),
        Command::Ablate { run, noise_seeds } => {
            let mut config = load(&run.config, seed)?;
            if let Some(n) = noise_seeds {
                config.probe.noise_seeds = n;
                config = config.resolve(None)?;
            }
            commands::ablate(&config, run.method, run.checkpoint.as_deref())
        }
        Command::Sweep { run, factors } => {
            let mut config = load(&run.config, seed)?;
            if let Some(f) = factors {
                config.probe.factors = f;
                config = config.resolve(None)?;
            }
            commands::sweep(&config, run.method, run.checkpoint.as_deref())
        }
        Command::Report { runs, out } => commands::report(&runs, &out),
    }
}
