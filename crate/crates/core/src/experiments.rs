//! Seeded experiment drivers shared by the command-line tool and the
//! acceptance suite. Work items run in parallel; results come back in input
//! order so every driver is deterministic.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::freeinit::{freeinit_sample, FreeInitConfig};
use crate::guidance::{GuidanceConfig, LossVariant};
use crate::model::{Condition, VelocityField};
use crate::sampler::{cfg_combine, coherence_stats, initial_noise, sample, NoiseSchedule, SampleConfig, SampleTrace, TraceRow};
use crate::stats::{welch_t_test, WelchTest};
use crate::synth::{condition_for_seed, CoherenceLabel};
use crate::tensor::{Dims, LatentVideo};

/// A clean latent to be probed at every noise level.
#[derive(Debug, Clone)]
pub struct ProfileVideo {
    pub name: String,
    pub label: CoherenceLabel,
    pub condition: u32,
    pub video: LatentVideo,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileRow {
    pub video: String,
    pub label: CoherenceLabel,
    pub step: usize,
    pub t: f64,
    pub mean_s: f64,
    pub max_s: f64,
}

/// Velocity statistics of each video interpolated toward one shared noise
/// draw at every schedule time. `rho == 0` uses the conditional branch alone.
pub fn variance_profile<M: VelocityField + Sync>(
    model: &M,
    schedule: &NoiseSchedule,
    videos: &[ProfileVideo],
    rho: f64,
    noise_seed: u64,
) -> Result<Vec<ProfileRow>> {
    let per_video: Vec<Result<Vec<ProfileRow>>> = videos
        .par_iter()
        .map(|v| {
            let noise = initial_noise(v.video.dims(), noise_seed);
            schedule
                .timesteps()
                .iter()
                .enumerate()
                .map(|(step, &t)| {
                    let zt = if t == 0.0 {
                        v.video.clone()
                    } else {
                        v.video.lincomb(1.0 - t, &noise, t)?
                    };
                    let cond = Condition::Label(v.condition);
                    let u_cond = model.forward(&zt, t, cond)?;
                    let u = if rho == 0.0 {
                        u_cond
                    } else {
                        cfg_combine(&u_cond, &model.forward(&zt, t, Condition::Null)?, rho)?
                    };
                    let (max_s, mean_s) = coherence_stats(&u)?;
                    Ok(ProfileRow {
                        video: v.name.clone(),
                        label: v.label,
                        step,
                        t,
                        mean_s,
                        max_s,
                    })
                })
                .collect()
        })
        .collect();
    Ok(per_video.into_iter().collect::<Result<Vec<_>>>()?.concat())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepSeparation {
    pub step: usize,
    /// Incoherent class first, coherent second.
    pub test: WelchTest,
}

/// Per-step Welch test of incoherent against coherent `max_s`.
pub fn profile_separation(rows: &[ProfileRow]) -> Result<Vec<StepSeparation>> {
    let steps = rows.iter().map(|r| r.step).max().map_or(0, |s| s + 1);
    (0..steps)
        .map(|step| {
            let pick = |label| -> Vec<f64> {
                rows.iter()
                    .filter(|r| r.step == step && r.label == label)
                    .map(|r| r.max_s)
                    .collect()
            };
            let test = welch_t_test(&pick(CoherenceLabel::Incoherent), &pick(CoherenceLabel::Coherent))?;
            Ok(StepSeparation { step, test })
        })
        .collect()
}

/// Shared sampling setup for the seeded drivers.
#[derive(Debug, Clone)]
pub struct SamplingSetup {
    pub dims: Dims,
    pub rho: f64,
    /// Vocabulary size; each seed's label is derived from the seed.
    pub vocab: usize,
}

impl SamplingSetup {
    pub fn config(&self, seed: u64) -> SampleConfig {
        let cond = Condition::Label(condition_for_seed(seed, self.vocab));
        SampleConfig::new(self.dims, cond, self.rho, seed)
    }
}

fn per_seed<T: Send>(seeds: &[u64], run: impl Fn(u64) -> Result<T> + Sync) -> Result<Vec<T>> {
    seeds.par_iter().map(|&s| run(s)).collect()
}

/// Samples every seed under `guidance` (or plainly when `None`).
pub fn sample_seeds<M: VelocityField + Sync>(
    model: &M,
    schedule: &NoiseSchedule,
    setup: &SamplingSetup,
    seeds: &[u64],
    guidance: Option<&GuidanceConfig>,
) -> Result<Vec<(LatentVideo, SampleTrace)>> {
    per_seed(seeds, |seed| {
        let mut cfg = setup.config(seed);
        cfg.guidance = guidance.cloned();
        sample(model, schedule, &cfg)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EffectRow {
    pub seed: u64,
    pub step: usize,
    pub max_s_guided: f64,
    pub max_s_unguided: f64,
}

#[derive(Debug, Clone)]
pub struct GuidanceEffect {
    pub rows: Vec<EffectRow>,
    pub guided: Vec<SampleTrace>,
    pub unguided: Vec<SampleTrace>,
}

/// Paired guided and unguided runs from identical initial noise.
pub fn guidance_effect<M: VelocityField + Sync>(
    model: &M,
    schedule: &NoiseSchedule,
    setup: &SamplingSetup,
    seeds: &[u64],
    guidance: &GuidanceConfig,
) -> Result<GuidanceEffect> {
    let guided = sample_seeds(model, schedule, setup, seeds, Some(guidance))?;
    let unguided = sample_seeds(model, schedule, setup, seeds, None)?;
    let mut rows = Vec::with_capacity(seeds.len() * schedule.len());
    for ((&seed, (_, g)), (_, u)) in seeds.iter().zip(&guided).zip(&unguided) {
        for (a, b) in g.rows.iter().zip(&u.rows) {
            rows.push(EffectRow {
                seed,
                step: a.step,
                max_s_guided: a.max_s,
                max_s_unguided: b.max_s,
            });
        }
    }
    Ok(GuidanceEffect {
        rows,
        guided: guided.into_iter().map(|(_, t)| t).collect(),
        unguided: unguided.into_iter().map(|(_, t)| t).collect(),
    })
}

/// Mean over seeds of `(guided, unguided)` max_s at each step.
pub fn effect_curves(rows: &[EffectRow]) -> Vec<(f64, f64)> {
    let steps = rows.iter().map(|r| r.step).max().map_or(0, |s| s + 1);
    (0..steps)
        .map(|step| {
            let at: Vec<&EffectRow> = rows.iter().filter(|r| r.step == step).collect();
            let n = at.len() as f64;
            (
                at.iter().map(|r| r.max_s_guided).sum::<f64>() / n,
                at.iter().map(|r| r.max_s_unguided).sum::<f64>() / n,
            )
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    MeanLoss,
    NoDebias,
    AllSteps,
}

impl std::str::FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "MEAN_LOSS" => Ok(Self::MeanLoss),
            "NO_DEBIAS" => Ok(Self::NoDebias),
            "ALL_STEPS" => Ok(Self::AllSteps),
            other => Err(format!("unknown ablation '{other}'")),
        }
    }
}

/// `base` with one ingredient swapped out.
pub fn ablated(base: &GuidanceConfig, ablation: Ablation, schedule_len: usize) -> GuidanceConfig {
    let mut cfg = base.clone();
    match ablation {
        Ablation::MeanLoss => cfg.variant = LossVariant::Mean,
        Ablation::NoDebias => cfg.variant = LossVariant::NoDebias,
        Ablation::AllSteps => cfg.refine_steps = (0..schedule_len).collect(),
    }
    cfg
}

/// Mean latent-gradient magnitude over refined rows whose step is in `steps`.
pub fn mean_refined_grad(traces: &[SampleTrace], steps: &[usize]) -> f64 {
    let picked: Vec<f64> = traces
        .iter()
        .flat_map(|t| &t.rows)
        .filter(|r| r.refined && steps.contains(&r.step))
        .map(|r| r.grad_mean_abs)
        .collect();
    picked.iter().sum::<f64>() / picked.len().max(1) as f64
}

/// Mean over traces of the last row's max_s.
pub fn final_max_s(traces: &[SampleTrace]) -> f64 {
    let last: Vec<f64> = traces.iter().filter_map(|t| t.rows.last()).map(|r| r.max_s).collect();
    last.iter().sum::<f64>() / last.len().max(1) as f64
}

/// Fraction of refined rows whose loss went down.
pub fn refinement_success_rate(traces: &[SampleTrace]) -> f64 {
    let refined: Vec<&TraceRow> = traces.iter().flat_map(|t| &t.rows).filter(|r| r.refined).collect();
    if refined.is_empty() {
        return 0.0;
    }
    refined.iter().filter(|r| r.loss_after < r.loss_before).count() as f64 / refined.len() as f64
}

/// Motion magnitude of each seed's output after one round and after `fi.rounds`.
pub fn freeinit_motion<M: VelocityField + Sync>(
    model: &M,
    schedule: &NoiseSchedule,
    setup: &SamplingSetup,
    seeds: &[u64],
    fi: &FreeInitConfig,
) -> Result<Vec<(f64, f64)>> {
    if fi.rounds < 2 {
        return Err(Error::Domain("comparison needs at least two rounds".into()));
    }
    per_seed(seeds, |seed| {
        let cfg = setup.config(seed);
        let once = freeinit_sample(model, schedule, &cfg, &FreeInitConfig { rounds: 1, ..*fi })?.0;
        let more = freeinit_sample(model, schedule, &cfg, fi)?.0;
        Ok((once.motion_magnitude(), more.motion_magnitude()))
    })
}
