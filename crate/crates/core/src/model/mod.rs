//! Toy velocity-field network with hand-written reverse mode.
//!
//! The network maps a latent video `z`, a timestep `t` and a condition id to a
//! velocity with the same dims as `z`:
//!
//! ```text
//! h1 = silu(conv3x3(z)  + b1 + Pt1·e(t) + Pc1·E[cond])
//! h2 = silu(tconv3(h1)  + b2 + Pt2·e(t) + Pc2·E[cond])
//! h3 = silu(conv3x3(h2) + b3 + Pt3·e(t) + Pc3·E[cond])
//! h4 = silu(tconv3(h3)  + b4 + Pt4·e(t) + Pc4·E[cond])
//! u  = conv3x3(h4) + (G·e(t)) ⊙ z
//! ```
//!
//! `conv3x3` runs per frame with circular padding, `tconv3` mixes neighbouring
//! frames. `e(t)` is a sinusoidal embedding and `E` a learned table whose last
//! row is the null (unconditional) token. The output layer and the time-gated
//! skip carry no bias, so all-zero parameters give an all-zero velocity.

mod checkpoint;
mod layers;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use train::{fm_loss, train_fm, TrainConfig, TrainExample, TrainOutcome};

use std::ops::Range;

use layers::{silu, silu_grad, Grid};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{Dims, LatentVideo};

const HIDDEN_LAYERS: usize = 4;

/// Prompt stand-in: a class label or the null token used for the unconditional branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Condition {
    Null,
    Label(u32),
}

/// Network shape. Serialized as seven `u32` fields in declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub channels: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub temporal_kernel: usize,
    pub time_embed: usize,
    pub cond_embed: usize,
    pub vocab: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            channels: 4,
            hidden: 16,
            kernel: 3,
            temporal_kernel: 3,
            time_embed: 16,
            cond_embed: 8,
            vocab: 4,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Domain(format!("architecture {self:?}: {msg}")));
        if self.channels == 0 || self.hidden == 0 || self.cond_embed == 0 || self.vocab == 0 {
            return bad("widths and vocabulary must be >= 1");
        }
        if self.kernel % 2 == 0 || self.temporal_kernel % 2 == 0 {
            return bad("kernel sizes must be odd");
        }
        if self.time_embed < 2 || self.time_embed % 2 != 0 {
            return bad("time embedding width must be even and >= 2");
        }
        Ok(())
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(self)
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }

    pub fn as_descriptor(&self) -> [u32; 7] {
        [
            self.channels,
            self.hidden,
            self.kernel,
            self.temporal_kernel,
            self.time_embed,
            self.cond_embed,
            self.vocab,
        ]
        .map(|v| v as u32)
    }

    pub fn from_descriptor(d: [u32; 7]) -> Result<Self> {
        let arch = Self {
            channels: d[0] as usize,
            hidden: d[1] as usize,
            kernel: d[2] as usize,
            temporal_kernel: d[3] as usize,
            time_embed: d[4] as usize,
            cond_embed: d[5] as usize,
            vocab: d[6] as usize,
        };
        arch.validate()?;
        Ok(arch)
    }

    fn cond_row(&self, cond: Condition) -> Result<usize> {
        match cond {
            Condition::Null => Ok(self.vocab),
            Condition::Label(id) if (id as usize) < self.vocab => Ok(id as usize),
            Condition::Label(id) => Err(Error::Domain(format!(
                "condition {id} outside vocabulary of size {}",
                self.vocab
            ))),
        }
    }
}

/// Offsets of each parameter block inside the flat parameter vector.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub conv1: Range<usize>,
    pub bias1: Range<usize>,
    pub tmix1: Range<usize>,
    pub bias2: Range<usize>,
    pub conv2: Range<usize>,
    pub bias3: Range<usize>,
    pub tmix2: Range<usize>,
    pub bias4: Range<usize>,
    pub conv_out: Range<usize>,
    /// `[layer][hidden][time_embed]`
    pub time_proj: Range<usize>,
    /// `[vocab + 1][cond_embed]`, last row is the null token.
    pub cond_table: Range<usize>,
    /// `[layer][hidden][cond_embed]`
    pub cond_proj: Range<usize>,
    /// `[channels][time_embed]`
    pub skip_gate: Range<usize>,
    pub total: usize,
}

impl ParamLayout {
    fn new(a: &Architecture) -> Self {
        let (c, k, ks, kt) = (a.channels, a.hidden, a.kernel * a.kernel, a.temporal_kernel);
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let conv1 = take(ks * k * c);
        let bias1 = take(k);
        let tmix1 = take(kt * k * k);
        let bias2 = take(k);
        let conv2 = take(ks * k * k);
        let bias3 = take(k);
        let tmix2 = take(kt * k * k);
        let bias4 = take(k);
        let conv_out = take(ks * c * k);
        let time_proj = take(HIDDEN_LAYERS * k * a.time_embed);
        let cond_table = take((a.vocab + 1) * a.cond_embed);
        let cond_proj = take(HIDDEN_LAYERS * k * a.cond_embed);
        let skip_gate = take(c * a.time_embed);
        Self {
            conv1,
            bias1,
            tmix1,
            bias2,
            conv2,
            bias3,
            tmix2,
            bias4,
            conv_out,
            time_proj,
            cond_table,
            cond_proj,
            skip_gate,
            total: at,
        }
    }

    fn biases(&self) -> [&Range<usize>; HIDDEN_LAYERS] {
        [&self.bias1, &self.bias2, &self.bias3, &self.bias4]
    }
}

/// Sinusoidal features `[sin(ω_j t)…, cos(ω_j t)…]` with `ω_j` geometric in `[1, 64]`.
pub fn timestep_embedding(t: f64, width: usize) -> Vec<f64> {
    let half = width / 2;
    let freq = |j: usize| {
        if half == 1 {
            1.0
        } else {
            64f64.powf(j as f64 / (half - 1) as f64)
        }
    };
    let mut e = Vec::with_capacity(width);
    e.extend((0..half).map(|j| (freq(j) * t).sin()));
    e.extend((0..half).map(|j| (freq(j) * t).cos()));
    e
}

/// Differentiable map `(z, t, condition) -> velocity` with a reverse-mode pullback.
pub trait VelocityField {
    /// Whatever the pullback needs from the forward pass.
    type Tape;

    fn forward_tape(&self, z: &LatentVideo, t: f64, cond: Condition) -> Result<(LatentVideo, Self::Tape)>;

    /// `Jᵀ g` for the Jacobian of the recorded forward pass with respect to `z`.
    fn pullback(&self, tape: &Self::Tape, g: &LatentVideo) -> Result<LatentVideo>;

    fn forward(&self, z: &LatentVideo, t: f64, cond: Condition) -> Result<LatentVideo> {
        Ok(self.forward_tape(z, t, cond)?.0)
    }

    fn vjp(&self, z: &LatentVideo, t: f64, cond: Condition, g: &LatentVideo) -> Result<LatentVideo> {
        let (_, tape) = self.forward_tape(z, t, cond)?;
        self.pullback(&tape, g)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyVelocityModel {
    arch: Architecture,
    params: Vec<f64>,
}

/// Activations recorded by [`ToyVelocityModel::forward_tape`].
#[derive(Debug, Clone)]
pub struct ModelTape {
    dims: Dims,
    z: Vec<f64>,
    temb: Vec<f64>,
    cond_row: usize,
    gate: Vec<f64>,
    /// Pre-activations and activations of the four hidden layers.
    pre: [Vec<f64>; HIDDEN_LAYERS],
    post: [Vec<f64>; HIDDEN_LAYERS],
}

impl ToyVelocityModel {
    pub fn new(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.param_count() {
            return Err(Error::Shape(format!(
                "architecture needs {} parameters, got {}",
                arch.param_count(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Validation("non-finite parameter".into()));
        }
        Ok(Self { arch, params })
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        Self::new(arch, vec![0.0; arch.param_count()])
    }

    /// Seeded initialization: fan-in scaled normals for weights, zero biases and skip gate.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        let mut params = vec![0.0; layout.total];
        let mut rng = SeededRng::derived(seed, 0x1417);
        let (c, k) = (arch.channels, arch.hidden);
        let ks = (arch.kernel * arch.kernel) as f64;
        let kt = arch.temporal_kernel as f64;
        let mut fill = |r: &Range<usize>, scale: f64| {
            for p in &mut params[r.clone()] {
                *p = scale * rng.normal();
            }
        };
        fill(&layout.conv1, (1.0 / (ks * c as f64)).sqrt());
        fill(&layout.tmix1, (1.0 / (kt * k as f64)).sqrt());
        fill(&layout.conv2, (1.0 / (ks * k as f64)).sqrt());
        fill(&layout.tmix2, (1.0 / (kt * k as f64)).sqrt());
        fill(&layout.conv_out, 0.5 * (1.0 / (ks * k as f64)).sqrt());
        fill(&layout.time_proj, (1.0 / arch.time_embed as f64).sqrt());
        fill(&layout.cond_table, 1.0);
        fill(&layout.cond_proj, 0.5 * (1.0 / arch.cond_embed as f64).sqrt());
        Self::new(arch, params)
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn check_input(&self, z: &LatentVideo) -> Result<()> {
        if z.dims().channels != self.arch.channels {
            return Err(Error::Shape(format!(
                "latent has {} channels, model expects {}",
                z.dims().channels,
                self.arch.channels
            )));
        }
        Ok(())
    }

    /// Per-layer channel biases: `b_l + Pt_l·e(t) + Pc_l·E[cond]`.
    fn layer_biases(&self, temb: &[f64], cond_row: usize) -> [Vec<f64>; HIDDEN_LAYERS] {
        let layout = self.arch.layout();
        let (k, te, ce) = (self.arch.hidden, self.arch.time_embed, self.arch.cond_embed);
        let p = &self.params;
        let emb = &p[layout.cond_table.start + cond_row * ce..][..ce];
        let biases = layout.biases();
        std::array::from_fn(|l| {
            let b = &p[biases[l].clone()];
            let tp = &p[layout.time_proj.start + l * k * te..][..k * te];
            let cp = &p[layout.cond_proj.start + l * k * ce..][..k * ce];
            (0..k)
                .map(|j| {
                    let mut v = b[j];
                    v += dot(&tp[j * te..(j + 1) * te], temb);
                    v += dot(&cp[j * ce..(j + 1) * ce], emb);
                    v
                })
                .collect()
        })
    }

    fn skip_gate(&self, temb: &[f64]) -> Vec<f64> {
        let layout = self.arch.layout();
        let te = self.arch.time_embed;
        let g = &self.params[layout.skip_gate.clone()];
        (0..self.arch.channels)
            .map(|c| dot(&g[c * te..(c + 1) * te], temb))
            .collect()
    }

    /// Gradient of `gᵀ·forward(z)` with respect to the parameters.
    pub fn param_grad(&self, z: &LatentVideo, t: f64, cond: Condition, g: &LatentVideo) -> Result<Vec<f64>> {
        let (_, tape) = self.forward_tape(z, t, cond)?;
        let (_, grad) = self.backward(&tape, g, true)?;
        Ok(grad.expect("parameter gradient requested"))
    }

    /// Gradients with respect to the input and optionally the parameters.
    fn backward(&self, tape: &ModelTape, g: &LatentVideo, want_params: bool) -> Result<(LatentVideo, Option<Vec<f64>>)> {
        if g.dims() != tape.dims {
            return Err(Error::Shape(format!(
                "cotangent dims {} do not match output dims {}",
                g.dims(),
                tape.dims
            )));
        }
        let arch = &self.arch;
        let layout = arch.layout();
        let p = &self.params;
        let dims = tape.dims;
        let grid = Grid {
            frames: dims.frames,
            width: dims.width,
            height: dims.height,
        };
        let (c, k, ks, kt) = (arch.channels, arch.hidden, arch.kernel, arch.temporal_kernel);
        let (te, ce) = (arch.time_embed, arch.cond_embed);
        let g = g.data();
        let mut grad = want_params.then(|| vec![0.0; layout.total]);

        // Skip path: u += gate ⊙ z
        let mut dz: Vec<f64> = g
            .iter()
            .enumerate()
            .map(|(i, &gv)| gv * tape.gate[i % c])
            .collect();
        if let Some(grad) = grad.as_mut() {
            let mut per_channel = vec![0.0; c];
            for (i, (&gv, &zv)) in g.iter().zip(&tape.z).enumerate() {
                per_channel[i % c] += gv * zv;
            }
            let gg = &mut grad[layout.skip_gate.clone()];
            for ch in 0..c {
                for e in 0..te {
                    gg[ch * te + e] += per_channel[ch] * tape.temb[e];
                }
            }
        }

        // Output convolution.
        let w_out = &p[layout.conv_out.clone()];
        let mut d_post = layers::spatial_backward_input(grid, g, c, w_out, ks, k);
        if let Some(grad) = grad.as_mut() {
            layers::spatial_backward_weight(grid, g, c, &tape.post[3], k, ks, &mut grad[layout.conv_out.clone()]);
        }

        let weights = [&layout.conv1, &layout.tmix1, &layout.conv2, &layout.tmix2];
        let biases = layout.biases();
        for l in (0..HIDDEN_LAYERS).rev() {
            let d_pre: Vec<f64> = d_post
                .iter()
                .zip(&tape.pre[l])
                .map(|(d, &a)| d * silu_grad(a))
                .collect();
            if let Some(grad) = grad.as_mut() {
                let mut d_bias = vec![0.0; k];
                for (i, &d) in d_pre.iter().enumerate() {
                    d_bias[i % k] += d;
                }
                for (gb, db) in grad[biases[l].clone()].iter_mut().zip(&d_bias) {
                    *gb += db;
                }
                let tp = layout.time_proj.start + l * k * te;
                let cp = layout.cond_proj.start + l * k * ce;
                let emb_at = layout.cond_table.start + tape.cond_row * ce;
                for j in 0..k {
                    for e in 0..te {
                        grad[tp + j * te + e] += d_bias[j] * tape.temb[e];
                    }
                    for d in 0..ce {
                        grad[cp + j * ce + d] += d_bias[j] * p[emb_at + d];
                        grad[emb_at + d] += d_bias[j] * p[cp + j * ce + d];
                    }
                }
            }
            let w = &p[weights[l].clone()];
            let input: &[f64] = if l == 0 { &tape.z } else { &tape.post[l - 1] };
            let cin = if l == 0 { c } else { k };
            if let Some(grad) = grad.as_mut() {
                let wg = &mut grad[weights[l].clone()];
                if l % 2 == 0 {
                    layers::spatial_backward_weight(grid, &d_pre, k, input, cin, ks, wg);
                } else {
                    layers::temporal_backward_weight(grid, &d_pre, input, k, kt, wg);
                }
            }
            let d_in = if l % 2 == 0 {
                layers::spatial_backward_input(grid, &d_pre, k, w, ks, cin)
            } else {
                layers::temporal_backward_input(grid, &d_pre, k, w, kt)
            };
            if l == 0 {
                for (a, b) in dz.iter_mut().zip(&d_in) {
                    *a += b;
                }
            } else {
                d_post = d_in;
            }
        }
        Ok((LatentVideo::from_vec(dims, dz)?, grad))
    }
}

impl VelocityField for ToyVelocityModel {
    type Tape = ModelTape;

    fn forward_tape(&self, z: &LatentVideo, t: f64, cond: Condition) -> Result<(LatentVideo, ModelTape)> {
        self.check_input(z)?;
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("timestep {t} outside [0, 1]")));
        }
        let arch = &self.arch;
        let layout = arch.layout();
        let cond_row = arch.cond_row(cond)?;
        let dims = z.dims();
        let grid = Grid {
            frames: dims.frames,
            width: dims.width,
            height: dims.height,
        };
        let (c, k, ks, kt) = (arch.channels, arch.hidden, arch.kernel, arch.temporal_kernel);
        let p = &self.params;
        let temb = timestep_embedding(t, arch.time_embed);
        let biases = self.layer_biases(&temb, cond_row);
        let gate = self.skip_gate(&temb);

        let mut pre: [Vec<f64>; HIDDEN_LAYERS] = Default::default();
        let mut post: [Vec<f64>; HIDDEN_LAYERS] = Default::default();
        let weights = [&layout.conv1, &layout.tmix1, &layout.conv2, &layout.tmix2];
        for l in 0..HIDDEN_LAYERS {
            let input: &[f64] = if l == 0 { z.data() } else { &post[l - 1] };
            let w = &p[weights[l].clone()];
            let mut a = if l % 2 == 0 {
                layers::spatial_forward(grid, input, if l == 0 { c } else { k }, w, ks, k)
            } else {
                layers::temporal_forward(grid, input, k, w, kt)
            };
            for (i, v) in a.iter_mut().enumerate() {
                *v += biases[l][i % k];
            }
            post[l] = a.iter().map(|&v| silu(v)).collect();
            pre[l] = a;
        }
        let mut out = layers::spatial_forward(grid, &post[3], k, &p[layout.conv_out.clone()], ks, c);
        for (i, (o, &zv)) in out.iter_mut().zip(z.data()).enumerate() {
            *o += gate[i % c] * zv;
        }
        let out = LatentVideo::from_vec(dims, out)
            .map_err(|e| Error::Numeric(format!("model output: {e}")))?;
        let tape = ModelTape {
            dims,
            z: z.data().to_vec(),
            temb,
            cond_row,
            gate,
            pre,
            post,
        };
        Ok((out, tape))
    }

    fn pullback(&self, tape: &ModelTape, g: &LatentVideo) -> Result<LatentVideo> {
        Ok(self.backward(tape, g, false)?.0)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests;
