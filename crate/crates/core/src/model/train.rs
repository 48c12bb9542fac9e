//! Flow-matching regression of the velocity field.
//!
//! Each draw picks a clean video `z1`, noise `z0 ~ N(0, I)` and `t ~ U(0, 1)`,
//! forms `z_t = (1 - t) z1 + t z0`, and regresses `u(z_t, t, cond)` onto the
//! path velocity `z0 - z1`. The condition is swapped for the null token with
//! probability `cond_dropout` so the model also learns the unconditional branch.

use super::{Condition, ToyVelocityModel, VelocityField};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::rng::SeededRng;
use crate::tensor::LatentVideo;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub cond_dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-3,
            steps: 1500,
            batch_size: 4,
            seed: 0,
            cond_dropout: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Domain(format!("learning rate {} must be > 0", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Domain("batch size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::Domain(format!("condition dropout {} outside [0, 1]", self.cond_dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainExample {
    pub video: LatentVideo,
    pub label: u32,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ToyVelocityModel,
    /// Batch-mean loss per step.
    pub losses: Vec<f64>,
    /// How many draws used the null condition.
    pub null_draws: usize,
    pub total_draws: usize,
}

/// Mean squared error of the predicted velocity against `z0 - z1`, and its
/// cotangent with respect to the prediction.
pub fn fm_loss(
    model: &ToyVelocityModel,
    z1: &LatentVideo,
    z0: &LatentVideo,
    t: f64,
    cond: Condition,
) -> Result<(f64, LatentVideo, LatentVideo)> {
    let zt = z1.lincomb(1.0 - t, z0, t)?;
    let target = z0.sub(z1)?;
    let pred = model.forward(&zt, t, cond)?;
    let resid = pred.sub(&target)?;
    let n = resid.data().len() as f64;
    let loss = resid.data().iter().map(|r| r * r).sum::<f64>() / n;
    let cotangent = resid.scale(2.0 / n);
    Ok((loss, zt, cotangent))
}

pub fn train_fm(model: ToyVelocityModel, data: &[TrainExample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let first = data
        .first()
        .ok_or_else(|| Error::Domain("training dataset is empty".into()))?;
    let dims = first.video.dims();
    if let Some(bad) = data.iter().find(|ex| ex.video.dims() != dims) {
        return Err(Error::Shape(format!(
            "dataset mixes dims {dims} and {}",
            bad.video.dims()
        )));
    }
    let vocab = model.architecture().vocab;
    if let Some(bad) = data.iter().find(|ex| ex.label as usize >= vocab) {
        return Err(Error::Domain(format!("label {} outside vocabulary {vocab}", bad.label)));
    }

    let mut model = model;
    let mut adam = Adam::new(cfg.learning_rate, model.params().len());
    let mut rng = SeededRng::derived(cfg.seed, 0x7241);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut null_draws = 0;
    let mut total_draws = 0;
    let mut grad = vec![0.0; model.params().len()];

    for _ in 0..cfg.steps {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut step_loss = 0.0;
        for _ in 0..cfg.batch_size {
            let ex = &data[rng.index(data.len())];
            let t = rng.uniform();
            let cond = if rng.bernoulli(cfg.cond_dropout) {
                null_draws += 1;
                Condition::Null
            } else {
                Condition::Label(ex.label)
            };
            total_draws += 1;
            let z0 = LatentVideo::from_vec(dims, rng.normal_vec(dims.len()))?;
            let (loss, zt, cotangent) = fm_loss(&model, &ex.video, &z0, t, cond)?;
            step_loss += loss;
            let g = model.param_grad(&zt, t, cond, &cotangent)?;
            for (acc, v) in grad.iter_mut().zip(&g) {
                *acc += v;
            }
        }
        let scale = 1.0 / cfg.batch_size as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        step_loss *= scale;
        if !step_loss.is_finite() {
            return Err(Error::Numeric(format!("training loss diverged at step {}", losses.len())));
        }
        losses.push(step_loss);
        adam.step(model.params_mut(), &grad);
    }

    Ok(TrainOutcome {
        model,
        losses,
        null_draws,
        total_draws,
    })
}
