//! Run configuration: a TOML file of flat sections, every key optional.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use flowmo_core::freeinit::{FreeInitConfig, FreqFilterSpec};
use flowmo_core::guidance::{GuidanceConfig, LossVariant};
use flowmo_core::model::{Architecture, TrainConfig};
use flowmo_core::optim::OptimizerKind;
use flowmo_core::sampler::{NoiseSchedule, StepStrategy};
use flowmo_core::synth::{CorpusSpec, SceneSpec};
use flowmo_core::tensor::Dims;

use crate::error::CliError;

#[derive(Debug, Clone, Default, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: PathsSection,
    pub corpus: CorpusSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub schedule: ScheduleSection,
    pub sampling: SamplingSection,
    pub guidance: GuidanceSection,
    pub profile: ProfileSection,
    pub freeinit: FreeInitSection,
}

/// Relative paths resolve against the output directory.
#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub out_dir: PathBuf,
    pub corpus_dir: PathBuf,
    pub model: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("flowmo-out"),
            corpus_dir: PathBuf::from("corpus"),
            model: PathBuf::from("model.fmm"),
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub per_class: usize,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub blobs: usize,
    pub radius: f64,
    pub speed: f64,
    pub teleport_probability: f64,
    pub seed: u64,
}

// Large slow blobs keep coherent motion smooth enough that the trained model's
// velocity separates corrupted clips from the earliest sampling steps.
const DEFAULT_BLOB_RADIUS: f64 = 6.0;
const DEFAULT_BLOB_SPEED: f64 = 0.25;
const DEFAULT_HIDDEN: usize = 24;

impl Default for CorpusSection {
    fn default() -> Self {
        let scene = SceneSpec::default();
        Self {
            per_class: 50,
            frames: 8,
            width: 16,
            height: 16,
            channels: 4,
            blobs: scene.blobs,
            radius: DEFAULT_BLOB_RADIUS,
            speed: DEFAULT_BLOB_SPEED,
            teleport_probability: 0.3,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: usize,
    pub kernel: usize,
    pub temporal_kernel: usize,
    pub time_embed: usize,
    pub cond_embed: usize,
    pub init_seed: u64,
    /// Multiplier applied to corpus videos before they reach the model, so
    /// the model sees roughly unit-variance latents.
    pub latent_scale: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let a = Architecture::default();
        Self {
            hidden: DEFAULT_HIDDEN,
            kernel: a.kernel,
            temporal_kernel: a.temporal_kernel,
            time_embed: a.time_embed,
            cond_embed: a.cond_embed,
            init_seed: 0,
            latent_scale: 5.0,
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub cond_dropout: f64,
    pub seed: u64,
    /// Also train on corrupted corpus videos.
    pub include_incoherent: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            steps: t.steps,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            cond_dropout: t.cond_dropout,
            seed: t.seed,
            include_incoherent: false,
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub steps: usize,
    pub strategy: String,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            steps: 50,
            strategy: "euler".into(),
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingSection {
    pub rho: f64,
    pub seed_start: u64,
    pub seed_count: usize,
}

impl Default for SamplingSection {
    fn default() -> Self {
        Self {
            rho: 5.0,
            seed_start: 0,
            seed_count: 80,
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceSection {
    pub eta: f64,
    pub refine_steps: Vec<usize>,
    pub optimizer: String,
    pub inner_iterations: usize,
    pub variant: String,
    pub cond_branch_only: bool,
}

impl Default for GuidanceSection {
    fn default() -> Self {
        let g = GuidanceConfig::default();
        Self {
            eta: g.eta,
            refine_steps: g.refine_steps.into_iter().collect(),
            optimizer: "adam".into(),
            inner_iterations: g.inner_iterations,
            variant: "max".into(),
            cond_branch_only: g.cond_branch_only,
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileSection {
    pub noise_seed: u64,
    /// Guidance scale used when probing; zero probes the conditional branch alone.
    pub rho: f64,
}

impl Default for ProfileSection {
    fn default() -> Self {
        Self { noise_seed: 7, rho: 0.0 }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct FreeInitSection {
    pub rounds: usize,
    pub order: u32,
    pub spatial_cutoff: f64,
    pub temporal_cutoff: f64,
    pub renoise_t: f64,
}

impl Default for FreeInitSection {
    fn default() -> Self {
        let f = FreeInitConfig::default();
        Self {
            rounds: f.rounds,
            order: f.filter.order,
            spatial_cutoff: f.filter.spatial_cutoff,
            temporal_cutoff: f.filter.temporal_cutoff,
            renoise_t: f.renoise_t,
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(config_err)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CliError::MissingInput(path.to_path_buf()),
            _ => CliError::Io(e),
        })?;
        Self::parse(&text)
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.paths.out_dir.join(p)
        }
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.resolve(&self.paths.corpus_dir)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.corpus_dir().join("manifest.csv")
    }

    pub fn model_path(&self) -> PathBuf {
        self.resolve(&self.paths.model)
    }

    pub fn out_dir(&self) -> &Path {
        &self.paths.out_dir
    }

    pub fn dims(&self) -> Result<Dims, CliError> {
        let c = &self.corpus;
        Dims::new(c.frames, c.width, c.height, c.channels).map_err(config_err)
    }

    pub fn corpus_spec(&self) -> Result<CorpusSpec, CliError> {
        let c = &self.corpus;
        Ok(CorpusSpec {
            per_class: c.per_class,
            dims: self.dims()?,
            scene: SceneSpec {
                blobs: c.blobs,
                radius: c.radius,
                speed: c.speed,
                directions: self.vocab(),
                ..SceneSpec::default()
            },
            teleport_probability: c.teleport_probability,
            seed: c.seed,
        })
    }

    /// Condition vocabulary shared by the corpus and the model.
    pub fn vocab(&self) -> usize {
        Architecture::default().vocab
    }

    pub fn architecture(&self) -> Result<Architecture, CliError> {
        let m = &self.model;
        let arch = Architecture {
            channels: self.corpus.channels,
            hidden: m.hidden,
            kernel: m.kernel,
            temporal_kernel: m.temporal_kernel,
            time_embed: m.time_embed,
            cond_embed: m.cond_embed,
            vocab: self.vocab(),
        };
        arch.validate().map_err(config_err)?;
        Ok(arch)
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let t = &self.train;
        let cfg = TrainConfig {
            learning_rate: t.learning_rate,
            steps: t.steps,
            batch_size: t.batch_size,
            seed: t.seed,
            cond_dropout: t.cond_dropout,
        };
        cfg.validate().map_err(config_err)?;
        Ok(cfg)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule, CliError> {
        let strategy: StepStrategy = self.schedule.strategy.parse().map_err(config_err)?;
        NoiseSchedule::uniform(self.schedule.steps, strategy).map_err(config_err)
    }

    pub fn seeds(&self) -> Vec<u64> {
        let s = &self.sampling;
        (0..s.seed_count as u64).map(|i| s.seed_start + i).collect()
    }

    pub fn guidance(&self) -> Result<GuidanceConfig, CliError> {
        let g = &self.guidance;
        let cfg = GuidanceConfig {
            eta: g.eta,
            refine_steps: g.refine_steps.iter().copied().collect::<BTreeSet<_>>(),
            rho: self.sampling.rho,
            optimizer: g.optimizer.parse::<OptimizerKind>().map_err(config_err)?,
            inner_iterations: g.inner_iterations,
            variant: g.variant.parse::<LossVariant>().map_err(config_err)?,
            cond_branch_only: g.cond_branch_only,
        };
        cfg.validate(self.schedule.steps).map_err(config_err)?;
        Ok(cfg)
    }

    pub fn freeinit(&self) -> Result<FreeInitConfig, CliError> {
        let f = &self.freeinit;
        let cfg = FreeInitConfig {
            rounds: f.rounds,
            filter: FreqFilterSpec {
                order: f.order,
                spatial_cutoff: f.spatial_cutoff,
                temporal_cutoff: f.temporal_cutoff,
            },
            renoise_t: f.renoise_t,
        };
        cfg.filter.validate().map_err(config_err)?;
        if cfg.rounds == 0 || !(0.0..=1.0).contains(&cfg.renoise_t) {
            return Err(CliError::Config("freeinit needs rounds >= 1 and renoise_t in [0, 1]".into()));
        }
        Ok(cfg)
    }

    /// Checks every section that does not depend on files.
    pub fn validate(&self) -> Result<(), CliError> {
        self.dims()?;
        self.architecture()?;
        self.train_config()?;
        self.schedule()?;
        self.guidance()?;
        self.freeinit()?;
        if !(self.sampling.rho >= 0.0 && self.profile.rho >= 0.0) {
            return Err(CliError::Config("guidance scales must be >= 0".into()));
        }
        if !(self.model.latent_scale > 0.0 && self.model.latent_scale.is_finite()) {
            return Err(CliError::Config("latent_scale must be positive".into()));
        }
        if self.sampling.seed_count == 0 {
            return Err(CliError::Config("seed_count must be >= 1".into()));
        }
        Ok(())
    }
}
