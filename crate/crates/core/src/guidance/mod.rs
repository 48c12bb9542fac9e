//! Motion-coherence loss on velocity predictions and latent refinement.
//!
//! For a velocity `u` of shape `(F, W, H, C)`:
//!
//! * `Δu[f] = |u[f+1] - u[f]|` removes appearance shared by consecutive frames,
//! * `σ²[w,h,c]` is the population variance of `Δu` over its `F - 1` frames,
//! * `s[w,h]` averages `σ²` over channels,
//! * the loss is `max s`, the most temporally erratic patch.
//!
//! Refinement moves the noisy latent `z` against `∇_z L`, chaining the loss
//! gradient through the guided combination `u = u_c + ρ (u_c - u_∅)` and both
//! model branches, then re-predicts at the updated latent.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::model::{Condition, VelocityField};
use crate::optim::{LatentOptimizer, OptimizerKind};
use crate::sampler::cfg_combine;
use crate::tensor::{reduce_variance_over_axis0, LatentVideo, VarianceMap};

/// Which scalar objective refinement descends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossVariant {
    /// `max_{w,h} s` on frame differences.
    #[default]
    Max,
    /// Spatial mean of `s` instead of the max.
    Mean,
    /// Max over patches of the channel-mean variance of `u` itself (no differencing).
    NoDebias,
}

impl std::str::FromStr for LossVariant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "max" => Ok(Self::Max),
            "mean" | "mean_loss" => Ok(Self::Mean),
            "no_debias" => Ok(Self::NoDebias),
            other => Err(format!("unknown loss variant '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceConfig {
    pub eta: f64,
    pub refine_steps: BTreeSet<usize>,
    pub rho: f64,
    pub optimizer: OptimizerKind,
    pub inner_iterations: usize,
    pub variant: LossVariant,
    /// Differentiate through the conditional branch only, treating `u_∅` as constant.
    pub cond_branch_only: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            eta: 0.005,
            refine_steps: (0..12).collect(),
            rho: 5.0,
            optimizer: OptimizerKind::Adam,
            inner_iterations: 1,
            variant: LossVariant::Max,
            cond_branch_only: false,
        }
    }
}

impl GuidanceConfig {
    /// Checks ranges against a schedule of `steps` entries. `eta = 0` is
    /// accepted and turns refinement into a no-op.
    pub fn validate(&self, steps: usize) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Domain(format!("learning rate {} must be >= 0", self.eta)));
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(Error::Domain(format!("guidance scale {} must be >= 0", self.rho)));
        }
        if self.inner_iterations == 0 {
            return Err(Error::Domain("inner_iterations must be >= 1".into()));
        }
        if let Some(&bad) = self.refine_steps.iter().find(|&&s| s >= steps) {
            return Err(Error::Domain(format!(
                "refine step {bad} outside a schedule of {steps} steps"
            )));
        }
        Ok(())
    }
}

/// Loss value with everything needed to inspect it.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub loss: f64,
    /// Patch achieving the max of `map`.
    pub argmax_patch: (usize, usize),
    pub map: VarianceMap,
    /// Frame differences `Δu` (`F - 1` frames), or `u` itself for [`LossVariant::NoDebias`].
    pub debiased: LatentVideo,
}

fn require_two_frames(u: &LatentVideo) -> Result<()> {
    if u.dims().frames < 2 {
        return Err(Error::Domain(format!(
            "frame differencing needs at least 2 frames, got {}",
            u.dims().frames
        )));
    }
    Ok(())
}

/// `|u[f+1] - u[f]|` elementwise, giving `F - 1` frames.
pub fn debias(u: &LatentVideo) -> Result<LatentVideo> {
    require_two_frames(u)?;
    let dims = u.dims();
    let n = dims.frame_len();
    let data = u.data();
    let out = data[n..]
        .iter()
        .zip(&data[..data.len() - n])
        .map(|(next, prev)| (next - prev).abs())
        .collect();
    LatentVideo::from_vec(dims.with_frames(dims.frames - 1), out)
}

/// Channel mean of the per-patch population variance over frames.
pub fn variance_map(delta: &LatentVideo) -> Result<VarianceMap> {
    let d = delta.dims();
    let (_, var) = reduce_variance_over_axis0(&d.as_array(), delta.data())?;
    let c = d.channels;
    let map = var
        .chunks_exact(c)
        .map(|patch| patch.iter().sum::<f64>() / c as f64)
        .collect();
    VarianceMap::from_vec(d.width, d.height, map)
}

pub fn flowmo_loss(u: &LatentVideo) -> Result<LossBreakdown> {
    objective(u, LossVariant::Max)
}

/// Loss of `u` under `variant`.
pub fn objective(u: &LatentVideo, variant: LossVariant) -> Result<LossBreakdown> {
    require_two_frames(u)?;
    let debiased = match variant {
        LossVariant::NoDebias => u.clone(),
        _ => debias(u)?,
    };
    let map = variance_map(&debiased)?;
    let (argmax_patch, max) = map.argmax();
    let loss = match variant {
        LossVariant::Mean => map.mean(),
        _ => max,
    };
    Ok(LossBreakdown {
        loss,
        argmax_patch,
        map,
        debiased,
    })
}

/// `∂L/∂u` for the max objective.
///
/// Non-zero only on the argmax patch column. The `|·|` kink uses `sign(0) = 0`.
pub fn loss_grad_wrt_u(u: &LatentVideo) -> Result<LatentVideo> {
    Ok(objective_grad_wrt_u(u, LossVariant::Max)?.0)
}

/// Gradient of the chosen objective with respect to `u`, plus its breakdown.
pub fn objective_grad_wrt_u(u: &LatentVideo, variant: LossVariant) -> Result<(LatentVideo, LossBreakdown)> {
    let breakdown = objective(u, variant)?;
    let dims = u.dims();
    let mut grad = LatentVideo::zeros(dims);
    match variant {
        LossVariant::Max => {
            let (w, h) = breakdown.argmax_patch;
            accumulate_debiased_patch(u, w, h, 1.0, &mut grad);
        }
        LossVariant::Mean => {
            let weight = 1.0 / (dims.width * dims.height) as f64;
            for w in 0..dims.width {
                for h in 0..dims.height {
                    accumulate_debiased_patch(u, w, h, weight, &mut grad);
                }
            }
        }
        LossVariant::NoDebias => {
            let (w, h) = breakdown.argmax_patch;
            let nf = dims.frames as f64;
            let c = dims.channels;
            for ch in 0..c {
                let mean = (0..dims.frames).map(|f| u.get(f, w, h, ch)).sum::<f64>() / nf;
                for f in 0..dims.frames {
                    let d = 2.0 * (u.get(f, w, h, ch) - mean) / (nf * c as f64);
                    grad.set(f, w, h, ch, d);
                }
            }
        }
    }
    Ok((grad, breakdown))
}

/// Adds `weight · ∂s[w,h]/∂u` for the frame-differenced patch score.
fn accumulate_debiased_patch(u: &LatentVideo, w: usize, h: usize, weight: f64, grad: &mut LatentVideo) {
    let dims = u.dims();
    let n = (dims.frames - 1) as f64;
    let c = dims.channels;
    let mut diffs = vec![0.0; dims.frames - 1];
    for ch in 0..c {
        for (f, d) in diffs.iter_mut().enumerate() {
            *d = u.get(f + 1, w, h, ch) - u.get(f, w, h, ch);
        }
        let mean = diffs.iter().map(|d| d.abs()).sum::<f64>() / n;
        for (f, &d) in diffs.iter().enumerate() {
            let sign = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            if sign == 0.0 {
                continue;
            }
            let g = weight * 2.0 * (d.abs() - mean) / (n * c as f64) * sign;
            let at_next = grad.get(f + 1, w, h, ch) + g;
            grad.set(f + 1, w, h, ch, at_next);
            let at_prev = grad.get(f, w, h, ch) - g;
            grad.set(f, w, h, ch, at_prev);
        }
    }
}

/// Everything computed on the way to `∇_z L`.
#[derive(Debug, Clone)]
pub struct LatentGradient {
    pub grad: LatentVideo,
    /// Guided velocity at the input latent.
    pub velocity: LatentVideo,
    pub breakdown: LossBreakdown,
}

/// `∇_z L(u_c + ρ (u_c - u_∅))` through both model branches.
pub fn loss_grad_wrt_z<M: VelocityField>(
    model: &M,
    z: &LatentVideo,
    t: f64,
    cond: Condition,
    rho: f64,
) -> Result<(LatentVideo, LossBreakdown)> {
    let g = latent_gradient(model, z, t, cond, rho, LossVariant::Max, false)?;
    Ok((g.grad, g.breakdown))
}

pub fn latent_gradient<M: VelocityField>(
    model: &M,
    z: &LatentVideo,
    t: f64,
    cond: Condition,
    rho: f64,
    variant: LossVariant,
    cond_branch_only: bool,
) -> Result<LatentGradient> {
    let (u_cond, tape_cond) = model.forward_tape(z, t, cond)?;
    let (u_null, tape_null) = model.forward_tape(z, t, Condition::Null)?;
    let velocity = cfg_combine(&u_cond, &u_null, rho)?;
    let (g_u, breakdown) = objective_grad_wrt_u(&velocity, variant)?;
    let through_cond = model.pullback(&tape_cond, &g_u)?;
    let grad = if rho == 0.0 || cond_branch_only {
        through_cond.scale(1.0 + rho)
    } else {
        let through_null = model.pullback(&tape_null, &g_u)?;
        through_cond.lincomb(1.0 + rho, &through_null, -rho)?
    };
    Ok(LatentGradient {
        grad,
        velocity,
        breakdown,
    })
}

/// Result of one refinement at a single timestep.
#[derive(Debug, Clone)]
pub struct Refinement {
    pub z: LatentVideo,
    /// Guided velocity re-predicted at the refined latent.
    pub velocity: LatentVideo,
    /// Loss breakdown at the latent before any update.
    pub before: LossBreakdown,
    /// Guided velocity at the latent before any update.
    pub velocity_before: LatentVideo,
    /// Mean |∇_z L| of the first update.
    pub grad_mean_abs: f64,
}

/// Applies `cfg.inner_iterations` optimizer updates to `z`, then re-predicts.
pub fn refine<M: VelocityField>(
    model: &M,
    z: &LatentVideo,
    t: f64,
    cond: Condition,
    cfg: &GuidanceConfig,
    optimizer: &mut LatentOptimizer,
) -> Result<Refinement> {
    if cfg.inner_iterations == 0 {
        return Err(Error::Domain("inner_iterations must be >= 1".into()));
    }
    let mut z = z.clone();
    let mut first: Option<(LossBreakdown, LatentVideo, f64)> = None;
    for _ in 0..cfg.inner_iterations {
        let g = latent_gradient(model, &z, t, cond, cfg.rho, cfg.variant, cfg.cond_branch_only)?;
        if first.is_none() {
            first = Some((g.breakdown, g.velocity, g.grad.mean_abs()));
        }
        optimizer.step(z.data_mut(), g.grad.data());
    }
    z.check_finite()
        .map_err(|e| Error::Numeric(format!("refined latent: {e}")))?;
    let u_cond = model.forward(&z, t, cond)?;
    let u_null = model.forward(&z, t, Condition::Null)?;
    let velocity = cfg_combine(&u_cond, &u_null, cfg.rho)?;
    let (before, velocity_before, grad_mean_abs) = first.expect("at least one iteration");
    Ok(Refinement {
        z,
        velocity,
        before,
        velocity_before,
        grad_mean_abs,
    })
}
