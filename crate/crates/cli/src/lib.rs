//! Command-line front end for training, sampling and diagnostics.

pub mod commands;
pub mod config;
pub mod error;
mod output;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

pub use config::RunConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "flowmo", version, about = "Train, sample and diagnose a toy video flow-matching model")]
pub struct Cli {
    /// TOML run configuration; every key is optional.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the seed the command uses (see each command's help).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; relative config paths resolve under it.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    Freeinit,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the labeled synthetic corpus. `--seed` sets the corpus seed.
    Corpus,
    /// Train the velocity model on the corpus. `--seed` sets the training seed.
    Train,
    /// Sample one latent per seed. `--seed` samples that single seed.
    Sample {
        /// Refine early steps with the variance objective.
        #[arg(long, conflicts_with_all = ["baseline", "plain"])]
        guided: bool,
        /// Use a re-initialization baseline instead.
        #[arg(long, value_enum, conflicts_with = "plain")]
        baseline: Option<Baseline>,
        /// Plain sampling (the default).
        #[arg(long)]
        plain: bool,
    },
    /// Velocity variance statistics of corpus videos along the noise schedule.
    /// `--seed` sets the shared noise seed.
    VarianceProfile,
    /// Paired guided and unguided runs. `--seed` sets the first seed.
    GuidanceEffect,
    /// Render one channel of a latent file as grayscale PGM frames.
    Visualize {
        /// Latent tensor file.
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        channel: u32,
    },
    /// Guided sampling with one ingredient swapped out. `--seed` samples that single seed.
    Ablate {
        /// MEAN_LOSS, NO_DEBIAS or ALL_STEPS.
        #[arg(long)]
        variant: String,
    },
}

/// Loads the config and applies flag overrides.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.paths.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        match cli.command {
            Command::Corpus => cfg.corpus.seed = seed,
            Command::Train => cfg.train.seed = seed,
            Command::VarianceProfile => cfg.profile.noise_seed = seed,
            Command::GuidanceEffect => cfg.sampling.seed_start = seed,
            Command::Sample { .. } | Command::Ablate { .. } => {
                cfg.sampling.seed_start = seed;
                cfg.sampling.seed_count = 1;
            }
            Command::Visualize { .. } => {}
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Caps the worker pool at `FLOWMO_THREADS` when set.
pub fn init_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var("FLOWMO_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| CliError::Config(format!("FLOWMO_THREADS={value:?} is not a positive integer")))?;
    // A pool may already exist when called twice in one process; keep it.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Runs one command and returns the files it wrote.
pub fn run(cli: &Cli) -> Result<Vec<PathBuf>, CliError> {
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Corpus => commands::corpus(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Sample { guided, baseline, .. } => {
            let mode = match (guided, baseline) {
                (true, _) => commands::SampleMode::Guided,
                (false, Some(Baseline::Freeinit)) => commands::SampleMode::FreeInit,
                (false, None) => commands::SampleMode::Plain,
            };
            commands::sample(&cfg, mode)
        }
        Command::VarianceProfile => commands::variance_profile(&cfg),
        Command::GuidanceEffect => commands::guidance_effect(&cfg),
        Command::Visualize { input, channel } => commands::visualize(&cfg, input, *channel as usize),
        Command::Ablate { variant } => {
            let ablation = variant.parse().map_err(CliError::Config)?;
            commands::ablate(&cfg, ablation)
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_args<I, T>(args: I) -> Result<Vec<PathBuf>, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Config(e.to_string()))?;
    run(&cli)
}
