//! Noise schedules, classifier-free guidance and the denoising loop.

use crate::error::{Error, Result};
use crate::guidance::{objective, refine, variance_map, debias, GuidanceConfig};
use crate::model::{Condition, VelocityField};
use crate::optim::LatentOptimizer;
use crate::rng::SeededRng;
use crate::tensor::{Dims, LatentVideo};

const NOISE_STREAM: u64 = 0x6e6f_6973;

/// How `z_{i+1}` is formed from `z_i` and the velocity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StepStrategy {
    /// `z - σ u`: explicit Euler on `dz/dt = u` from `t = 1` towards `t = 0`.
    #[default]
    Euler,
    /// `(1 - σ) z - σ u`: shrinks the latent before the velocity step.
    Contracting,
}

impl std::str::FromStr for StepStrategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "euler" => Ok(Self::Euler),
            "contracting" => Ok(Self::Contracting),
            other => Err(format!("unknown step strategy '{other}'")),
        }
    }
}

/// Decreasing timesteps `t_0 = 1 > t_1 > … >= 0` with one coefficient per step.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    timesteps: Vec<f64>,
    sigmas: Vec<f64>,
    strategy: StepStrategy,
}

impl NoiseSchedule {
    /// `t_i = 1 - i/n`, `σ_i = 1/n`.
    pub fn uniform(n: usize, strategy: StepStrategy) -> Result<Self> {
        if n == 0 {
            return Err(Error::Domain("schedule needs at least one step".into()));
        }
        let timesteps = (0..n).map(|i| 1.0 - i as f64 / n as f64).collect();
        Self::from_timesteps(timesteps, strategy)
    }

    /// Coefficients default to Euler step sizes `t_i - t_{i+1}` with `t_N = 0`.
    pub fn from_timesteps(timesteps: Vec<f64>, strategy: StepStrategy) -> Result<Self> {
        if timesteps.is_empty() {
            return Err(Error::Domain("schedule needs at least one step".into()));
        }
        if timesteps[0] != 1.0 {
            return Err(Error::Domain(format!("schedule must start at t = 1, got {}", timesteps[0])));
        }
        if timesteps.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Domain("timesteps must be strictly decreasing".into()));
        }
        if *timesteps.last().unwrap() < 0.0 {
            return Err(Error::Domain("timesteps must be >= 0".into()));
        }
        let sigmas = timesteps
            .iter()
            .enumerate()
            .map(|(i, &t)| t - timesteps.get(i + 1).copied().unwrap_or(0.0))
            .collect();
        Ok(Self {
            timesteps,
            sigmas,
            strategy,
        })
    }

    /// Replaces the per-step coefficients (only meaningful for [`StepStrategy::Contracting`]).
    pub fn with_sigmas(mut self, sigmas: Vec<f64>) -> Result<Self> {
        if sigmas.len() != self.timesteps.len() {
            return Err(Error::Shape(format!(
                "{} coefficients for {} timesteps",
                sigmas.len(),
                self.timesteps.len()
            )));
        }
        if sigmas.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::Domain("coefficients must lie in [0, 1]".into()));
        }
        if self.strategy == StepStrategy::Euler {
            return Err(Error::Domain("Euler coefficients are fixed by the timesteps".into()));
        }
        self.sigmas = sigmas;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }

    pub fn timesteps(&self) -> &[f64] {
        &self.timesteps
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn strategy(&self) -> StepStrategy {
        self.strategy
    }
}

/// `u_cond + ρ (u_cond - u_uncond)`.
pub fn cfg_combine(u_cond: &LatentVideo, u_uncond: &LatentVideo, rho: f64) -> Result<LatentVideo> {
    u_cond.zip_map(u_uncond, |c, n| c + rho * (c - n))
}

pub fn fm_step(z: &LatentVideo, u: &LatentVideo, sigma: f64, strategy: StepStrategy) -> Result<LatentVideo> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::Domain(format!("step coefficient {sigma} outside [0, 1]")));
    }
    match strategy {
        StepStrategy::Euler => z.zip_map(u, |zv, uv| zv - sigma * uv),
        StepStrategy::Contracting => z.zip_map(u, |zv, uv| (1.0 - sigma) * zv - sigma * uv),
    }
}

/// One row per schedule step.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub t: f64,
    pub sigma: f64,
    /// Objective at the latent entering the step.
    pub loss_before: f64,
    /// Objective of the velocity actually used for the update.
    pub loss_after: f64,
    pub argmax_w: usize,
    pub argmax_h: usize,
    pub refined: bool,
    /// Max and mean of the frame-differenced variance map of the committed velocity.
    pub max_s: f64,
    pub mean_s: f64,
    /// Mean |∇_z L| of the refinement update, zero when not refined.
    pub grad_mean_abs: f64,
}

#[derive(Debug, Clone, Default)]
pub struct SampleTrace {
    pub rows: Vec<TraceRow>,
    /// One-shot clean estimates `z_t - t·u` per step, when requested.
    pub denoised: Vec<LatentVideo>,
}

#[derive(Debug, Clone)]
pub struct SampleConfig {
    pub dims: Dims,
    pub cond: Condition,
    pub rho: f64,
    pub seed: u64,
    pub guidance: Option<GuidanceConfig>,
    pub keep_denoised: bool,
}

impl SampleConfig {
    pub fn new(dims: Dims, cond: Condition, rho: f64, seed: u64) -> Self {
        Self {
            dims,
            cond,
            rho,
            seed,
            guidance: None,
            keep_denoised: false,
        }
    }

    pub fn with_guidance(mut self, guidance: GuidanceConfig) -> Self {
        self.guidance = Some(guidance);
        self
    }
}

/// Standard normal latent used as the starting point for `seed`.
pub fn initial_noise(dims: Dims, seed: u64) -> LatentVideo {
    let mut rng = SeededRng::derived(seed, NOISE_STREAM);
    LatentVideo::from_fn(dims, |_, _, _, _| rng.normal())
}

/// Runs the full schedule from the seed's initial noise.
pub fn sample<M: VelocityField>(model: &M, schedule: &NoiseSchedule, cfg: &SampleConfig) -> Result<(LatentVideo, SampleTrace)> {
    sample_from(model, schedule, initial_noise(cfg.dims, cfg.seed), cfg)
}

/// Runs the full schedule from a given starting latent.
pub fn sample_from<M: VelocityField>(
    model: &M,
    schedule: &NoiseSchedule,
    z_init: LatentVideo,
    cfg: &SampleConfig,
) -> Result<(LatentVideo, SampleTrace)> {
    if z_init.dims() != cfg.dims {
        return Err(Error::Shape(format!(
            "initial latent {} does not match requested dims {}",
            z_init.dims(),
            cfg.dims
        )));
    }
    if !(cfg.rho >= 0.0 && cfg.rho.is_finite()) {
        return Err(Error::Domain(format!("guidance scale {} must be >= 0", cfg.rho)));
    }
    if let Some(g) = &cfg.guidance {
        g.validate(schedule.len())?;
    }
    let variant = cfg.guidance.as_ref().map(|g| g.variant).unwrap_or_default();
    let mut optimizer = cfg
        .guidance
        .as_ref()
        .map(|g| LatentOptimizer::new(g.optimizer, g.eta, cfg.dims.len()));

    let mut z = z_init;
    let mut trace = SampleTrace::default();
    for (i, (&t, &sigma)) in schedule.timesteps().iter().zip(schedule.sigmas()).enumerate() {
        let refine_here = cfg.guidance.as_ref().filter(|g| g.refine_steps.contains(&i));
        let (u, row) = match (refine_here, optimizer.as_mut()) {
            (Some(g), Some(opt)) => {
                let guidance = GuidanceConfig { rho: cfg.rho, ..g.clone() };
                let r = refine(model, &z, t, cfg.cond, &guidance, opt)?;
                z = r.z;
                let after = objective(&r.velocity, variant)?;
                let (max_s, mean_s) = coherence_stats(&r.velocity)?;
                let row = TraceRow {
                    step: i,
                    t,
                    sigma,
                    loss_before: r.before.loss,
                    loss_after: after.loss,
                    argmax_w: r.before.argmax_patch.0,
                    argmax_h: r.before.argmax_patch.1,
                    refined: true,
                    max_s,
                    mean_s,
                    grad_mean_abs: r.grad_mean_abs,
                };
                (r.velocity, row)
            }
            _ => {
                let u_cond = model.forward(&z, t, cfg.cond)?;
                let u_null = model.forward(&z, t, Condition::Null)?;
                let u = cfg_combine(&u_cond, &u_null, cfg.rho)?;
                let loss = objective(&u, variant)?;
                let (max_s, mean_s) = coherence_stats(&u)?;
                let row = TraceRow {
                    step: i,
                    t,
                    sigma,
                    loss_before: loss.loss,
                    loss_after: loss.loss,
                    argmax_w: loss.argmax_patch.0,
                    argmax_h: loss.argmax_patch.1,
                    refined: false,
                    max_s,
                    mean_s,
                    grad_mean_abs: 0.0,
                };
                (u, row)
            }
        };
        if cfg.keep_denoised {
            trace.denoised.push(z.lincomb(1.0, &u, -t)?);
        }
        z = fm_step(&z, &u, sigma, schedule.strategy())?;
        z.check_finite()
            .map_err(|e| Error::Numeric(format!("latent at step {i}: {e}")))?;
        trace.rows.push(row);
    }
    Ok((z, trace))
}

/// Max and mean of the frame-differenced variance map of `u`.
pub fn coherence_stats(u: &LatentVideo) -> Result<(f64, f64)> {
    let map = variance_map(&debias(u)?)?;
    Ok((map.max(), map.mean()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, ToyVelocityModel};

    fn video(dims: Dims, seed: u64) -> LatentVideo {
        let mut rng = SeededRng::new(seed);
        LatentVideo::from_vec(dims, rng.normal_vec(dims.len())).unwrap()
    }

    #[test]
    fn cfg_formula() {
        let d = Dims::new(1, 1, 1, 1).unwrap();
        let c = LatentVideo::filled(d, 2.0);
        let n = LatentVideo::filled(d, 1.0);
        assert_eq!(cfg_combine(&c, &n, 3.0).unwrap().data(), &[5.0]);
        assert_eq!(cfg_combine(&c, &n, 0.0).unwrap(), c);
        let r = video(Dims::new(2, 3, 3, 2).unwrap(), 1);
        assert_eq!(cfg_combine(&r, &r, 7.5).unwrap(), r);
        assert!(cfg_combine(&c, &LatentVideo::zeros(Dims::new(2, 1, 1, 1).unwrap()), 1.0).is_err());
    }

    #[test]
    fn step_formulas() {
        let d = Dims::new(2, 2, 2, 1).unwrap();
        let z = video(d, 2);
        let u = video(d, 3);
        for s in [StepStrategy::Euler, StepStrategy::Contracting] {
            assert_eq!(fm_step(&z, &u, 0.0, s).unwrap(), z);
        }
        assert_eq!(fm_step(&z, &u, 1.0, StepStrategy::Contracting).unwrap(), u.scale(-1.0));
        assert!(fm_step(&z, &u, 1.5, StepStrategy::Euler).is_err());
    }

    #[test]
    fn euler_recovers_endpoint_for_exact_velocity() {
        let d = Dims::new(3, 4, 4, 2).unwrap();
        let z0 = video(d, 4);
        let z1 = video(d, 5);
        let v = z0.sub(&z1).unwrap();
        for n in [1, 7, 100] {
            let schedule = NoiseSchedule::uniform(n, StepStrategy::Euler).unwrap();
            let mut z = z0.clone();
            for &sigma in schedule.sigmas() {
                z = fm_step(&z, &v, sigma, StepStrategy::Euler).unwrap();
            }
            assert!(z.max_abs_diff(&z1).unwrap() <= 1e-8, "n = {n}");
        }
    }

    #[test]
    fn schedule_invariants() {
        let s = NoiseSchedule::uniform(50, StepStrategy::Euler).unwrap();
        assert_eq!(s.len(), 50);
        assert_eq!(s.timesteps()[0], 1.0);
        for i in 0..49 {
            assert!(s.timesteps()[i] > s.timesteps()[i + 1]);
            assert!((s.sigmas()[i] - (s.timesteps()[i] - s.timesteps()[i + 1])).abs() < 1e-15);
        }
        assert!((s.sigmas()[49] - s.timesteps()[49]).abs() < 1e-15);
        assert!(NoiseSchedule::from_timesteps(vec![0.9, 0.5], StepStrategy::Euler).is_err());
        assert!(NoiseSchedule::from_timesteps(vec![1.0, 0.5, 0.5], StepStrategy::Euler).is_err());
        let lit = NoiseSchedule::uniform(2, StepStrategy::Contracting)
            .unwrap()
            .with_sigmas(vec![0.1, 0.2])
            .unwrap();
        assert_eq!(lit.sigmas(), &[0.1, 0.2]);
    }

    fn tiny_model() -> ToyVelocityModel {
        let arch = Architecture { channels: 2, hidden: 4, vocab: 2, ..Architecture::default() };
        ToyVelocityModel::init(arch, 3).unwrap()
    }

    #[test]
    fn zero_eta_guidance_matches_plain_sampling() {
        let model = tiny_model();
        let schedule = NoiseSchedule::uniform(6, StepStrategy::Euler).unwrap();
        let base = SampleConfig::new(Dims::new(4, 5, 5, 2).unwrap(), Condition::Label(1), 2.0, 17);
        let (plain, _) = sample(&model, &schedule, &base).unwrap();
        let guided_cfg = base.clone().with_guidance(GuidanceConfig {
            eta: 0.0,
            refine_steps: (0..4).collect(),
            ..GuidanceConfig::default()
        });
        let (guided, trace) = sample(&model, &schedule, &guided_cfg).unwrap();
        assert!(plain.data().iter().zip(guided.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(trace.rows.len(), 6);
    }

    #[test]
    fn trace_bookkeeping() {
        let model = tiny_model();
        let schedule = NoiseSchedule::uniform(7, StepStrategy::Euler).unwrap();
        let steps = [0usize, 2, 5];
        let mut cfg = SampleConfig::new(Dims::new(3, 4, 4, 2).unwrap(), Condition::Label(0), 1.0, 3)
            .with_guidance(GuidanceConfig {
                refine_steps: steps.iter().copied().collect(),
                ..GuidanceConfig::default()
            });
        cfg.keep_denoised = true;
        let (a, trace) = sample(&model, &schedule, &cfg).unwrap();
        assert_eq!(trace.rows.len(), schedule.len());
        assert_eq!(trace.denoised.len(), schedule.len());
        for row in &trace.rows {
            assert_eq!(row.refined, steps.contains(&row.step));
            assert!(row.loss_before >= 0.0 && row.loss_after >= 0.0);
            assert_eq!(row.t, schedule.timesteps()[row.step]);
        }
        let (b, _) = sample(&model, &schedule, &cfg).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn refine_step_out_of_range_is_rejected() {
        let model = tiny_model();
        let schedule = NoiseSchedule::uniform(3, StepStrategy::Euler).unwrap();
        let cfg = SampleConfig::new(Dims::new(2, 2, 2, 2).unwrap(), Condition::Null, 1.0, 0)
            .with_guidance(GuidanceConfig::default());
        assert!(matches!(sample(&model, &schedule, &cfg), Err(Error::Domain(_))));
    }
}
