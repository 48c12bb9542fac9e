//! One function per subcommand. Each returns the paths it wrote.

use std::fs;
use std::path::{Path, PathBuf};

use flowmo_core::experiments::{
    ablated, guidance_effect as run_effect, profile_separation, sample_seeds, variance_profile as run_profile,
    Ablation, ProfileVideo, SamplingSetup,
};
use flowmo_core::freeinit::freeinit_sample;
use flowmo_core::model::{load_checkpoint, save_checkpoint, train_fm, ToyVelocityModel, TrainExample};
use flowmo_core::sampler::SampleTrace;
use flowmo_core::synth::{build_corpus, condition_for_seed, read_manifest, CoherenceLabel};
use flowmo_core::tensor::{tensor_read, tensor_write, LatentVideo};
use flowmo_core::visualize::{to_gray, write_frames};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::output::{trace_line, write_csv, TRACE_HEADER};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Plain,
    Guided,
    FreeInit,
}

impl SampleMode {
    fn tag(self) -> &'static str {
        match self {
            Self::Plain => "plain",
            Self::Guided => "guided",
            Self::FreeInit => "freeinit",
        }
    }
}

fn require(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingInput(path.to_path_buf()))
    }
}

fn load_model(cfg: &RunConfig) -> Result<ToyVelocityModel, CliError> {
    let path = cfg.model_path();
    require(&path)?;
    let model = load_checkpoint(&path)?;
    if model.architecture().channels != cfg.corpus.channels {
        return Err(CliError::Config(format!(
            "checkpoint has {} channels, config asks for {}",
            model.architecture().channels,
            cfg.corpus.channels
        )));
    }
    Ok(model)
}

struct CorpusVideo {
    name: String,
    label: CoherenceLabel,
    condition: u32,
    video: LatentVideo,
}

fn load_corpus(cfg: &RunConfig) -> Result<Vec<CorpusVideo>, CliError> {
    let manifest = cfg.manifest_path();
    require(&manifest)?;
    read_manifest(&manifest)?
        .into_iter()
        .map(|row| {
            require(&row.path)?;
            let video = tensor_read(&row.path)?.scale(cfg.model.latent_scale);
            let name = row
                .path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok(CorpusVideo {
                name,
                label: row.label,
                condition: condition_for_seed(row.seed, cfg.vocab()),
                video,
            })
        })
        .collect()
}

pub fn corpus(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let manifest = build_corpus(&cfg.corpus_spec()?, cfg.corpus_dir())?;
    Ok(vec![manifest])
}

pub fn train(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let data: Vec<TrainExample> = load_corpus(cfg)?
        .into_iter()
        .filter(|v| cfg.train.include_incoherent || v.label == CoherenceLabel::Coherent)
        .map(|v| TrainExample {
            video: v.video,
            label: v.condition,
        })
        .collect();
    let init = ToyVelocityModel::init(cfg.architecture()?, cfg.model.init_seed)?;
    let outcome = train_fm(init, &data, &cfg.train_config()?)?;
    let model_path = cfg.model_path();
    if let Some(dir) = model_path.parent() {
        fs::create_dir_all(dir)?;
    }
    save_checkpoint(&outcome.model, &model_path)?;
    let loss_path = cfg.out_dir().join("train_loss.csv");
    write_csv(
        &loss_path,
        "step,loss",
        outcome.losses.iter().enumerate().map(|(i, l)| format!("{i},{l}")),
    )?;
    Ok(vec![model_path, loss_path])
}

fn setup(cfg: &RunConfig) -> Result<SamplingSetup, CliError> {
    Ok(SamplingSetup {
        dims: cfg.dims()?,
        rho: cfg.sampling.rho,
        vocab: cfg.vocab(),
    })
}

fn write_runs(dir: &Path, seeds: &[u64], runs: &[(LatentVideo, SampleTrace)]) -> Result<Vec<PathBuf>, CliError> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (seed, (z, trace)) in seeds.iter().zip(runs) {
        let latent = dir.join(format!("seed_{seed:04}.fmt"));
        tensor_write(z, &latent)?;
        let trace_path = dir.join(format!("trace_seed_{seed:04}.csv"));
        write_csv(&trace_path, TRACE_HEADER, trace.rows.iter().map(trace_line))?;
        written.push(latent);
        written.push(trace_path);
    }
    Ok(written)
}

pub fn sample(cfg: &RunConfig, mode: SampleMode) -> Result<Vec<PathBuf>, CliError> {
    let model = load_model(cfg)?;
    let schedule = cfg.schedule()?;
    let setup = setup(cfg)?;
    let seeds = cfg.seeds();
    let runs = match mode {
        SampleMode::Plain => sample_seeds(&model, &schedule, &setup, &seeds, None)?,
        SampleMode::Guided => sample_seeds(&model, &schedule, &setup, &seeds, Some(&cfg.guidance()?))?,
        SampleMode::FreeInit => {
            let fi = cfg.freeinit()?;
            seeds
                .par_iter()
                .map(|&seed| freeinit_sample(&model, &schedule, &setup.config(seed), &fi))
                .collect::<Result<Vec<_>, _>>()?
        }
    };
    write_runs(&cfg.out_dir().join(format!("sample_{}", mode.tag())), &seeds, &runs)
}

pub fn variance_profile(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let model = load_model(cfg)?;
    let schedule = cfg.schedule()?;
    let videos: Vec<ProfileVideo> = load_corpus(cfg)?
        .into_iter()
        .map(|v| ProfileVideo {
            name: v.name,
            label: v.label,
            condition: v.condition,
            video: v.video,
        })
        .collect();
    let rows = run_profile(&model, &schedule, &videos, cfg.profile.rho, cfg.profile.noise_seed)?;
    let path = cfg.out_dir().join("variance_profile.csv");
    write_csv(
        &path,
        "video,label,step,mean_s,max_s",
        rows.iter()
            .map(|r| format!("{},{},{},{},{}", r.video, r.label, r.step, r.mean_s, r.max_s)),
    )?;
    let mut written = vec![path];
    let has_both = [CoherenceLabel::Coherent, CoherenceLabel::Incoherent]
        .iter()
        .all(|l| videos.iter().filter(|v| v.label == *l).count() >= 2);
    if has_both {
        let summary = cfg.out_dir().join("variance_profile_summary.csv");
        let times = schedule.timesteps();
        write_csv(
            &summary,
            "step,t,max_s_incoherent,max_s_coherent,t_stat,p_value",
            profile_separation(&rows)?.iter().map(|s| {
                format!(
                    "{},{},{},{},{},{}",
                    s.step, times[s.step], s.test.mean_a, s.test.mean_b, s.test.t, s.test.p_two_sided
                )
            }),
        )?;
        written.push(summary);
    }
    Ok(written)
}

pub fn guidance_effect(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let model = load_model(cfg)?;
    let effect = run_effect(&model, &cfg.schedule()?, &setup(cfg)?, &cfg.seeds(), &cfg.guidance()?)?;
    let path = cfg.out_dir().join("guidance_effect.csv");
    write_csv(
        &path,
        "seed,step,max_s_guided,max_s_unguided",
        effect
            .rows
            .iter()
            .map(|r| format!("{},{},{},{}", r.seed, r.step, r.max_s_guided, r.max_s_unguided)),
    )?;
    Ok(vec![path])
}

pub fn visualize(cfg: &RunConfig, input: &Path, channel: usize) -> Result<Vec<PathBuf>, CliError> {
    require(input)?;
    let video = tensor_read(input)?;
    if channel >= video.dims().channels {
        return Err(CliError::Config(format!(
            "channel {channel} out of range for {}",
            video.dims()
        )));
    }
    let gray = to_gray(&video, channel)?;
    if gray.constant {
        eprintln!("warning: channel {channel} is constant; writing mid-gray frames");
    }
    Ok(write_frames(&gray, cfg.out_dir())?)
}

pub fn ablate(cfg: &RunConfig, ablation: Ablation) -> Result<Vec<PathBuf>, CliError> {
    let model = load_model(cfg)?;
    let schedule = cfg.schedule()?;
    let setup = setup(cfg)?;
    let seeds = cfg.seeds();
    let base = cfg.guidance()?;
    let variant = ablated(&base, ablation, schedule.len());
    let tag = match ablation {
        Ablation::MeanLoss => "mean_loss",
        Ablation::NoDebias => "no_debias",
        Ablation::AllSteps => "all_steps",
    };
    let ablated_runs = sample_seeds(&model, &schedule, &setup, &seeds, Some(&variant))?;
    let default_runs = sample_seeds(&model, &schedule, &setup, &seeds, Some(&base))?;
    let dir = cfg.out_dir().join(format!("ablate_{tag}"));
    let mut written = write_runs(&dir, &seeds, &ablated_runs)?;
    let summary = dir.join("summary.csv");
    let mut lines = Vec::new();
    for (seed, ((_, a), (_, d))) in seeds.iter().zip(ablated_runs.iter().zip(&default_runs)) {
        for (ra, rd) in a.rows.iter().zip(&d.rows) {
            lines.push(format!(
                "{seed},{},{},{},{},{}",
                ra.step, ra.grad_mean_abs, rd.grad_mean_abs, ra.max_s, rd.max_s
            ));
        }
    }
    write_csv(
        &summary,
        "seed,step,grad_mean_abs_variant,grad_mean_abs_default,max_s_variant,max_s_default",
        lines,
    )?;
    written.push(summary);
    Ok(written)
}
