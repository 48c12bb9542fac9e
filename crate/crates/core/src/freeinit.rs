//! Frequency-mixing re-initialization baseline.
//!
//! After a full sampling pass the clean latent is pushed back toward noise,
//! its low spatio-temporal frequencies are kept, the high band is replaced by
//! fresh Gaussian noise, and sampling restarts from the mixture.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::model::VelocityField;
use crate::rng::SeededRng;
use crate::sampler::{initial_noise, sample_from, NoiseSchedule, SampleConfig, SampleTrace};
use crate::tensor::{Dims, LatentVideo};

const RENOISE_STREAM: u64 = 0x7265_6e6f;
const FRESH_STREAM: u64 = 0x6672_6573;
const IMAG_TOLERANCE: f64 = 1e-10;

/// Butterworth low-pass settings; cutoffs are in normalized frequency units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FreqFilterSpec {
    pub order: u32,
    pub spatial_cutoff: f64,
    pub temporal_cutoff: f64,
}

impl Default for FreqFilterSpec {
    fn default() -> Self {
        Self {
            order: 4,
            spatial_cutoff: 0.25,
            temporal_cutoff: 0.25,
        }
    }
}

impl FreqFilterSpec {
    pub fn validate(&self) -> Result<()> {
        if self.order == 0 {
            return Err(Error::Domain("filter order must be >= 1".into()));
        }
        for (name, c) in [("spatial", self.spatial_cutoff), ("temporal", self.temporal_cutoff)] {
            if !(c > 0.0 && c <= 1.0) {
                return Err(Error::Domain(format!("{name} cutoff {c} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

/// Butterworth gain at normalized distance `d` (cutoff at `d = 1`).
pub fn butterworth_gain(d: f64, order: u32) -> f64 {
    1.0 / (1.0 + d.abs().powi(2 * order as i32))
}

/// Signed normalized frequency of DFT bin `k` out of `n`, in `[-0.5, 0.5)`.
pub fn bin_frequency(k: usize, n: usize) -> f64 {
    if 2 * k < n {
        k as f64 / n as f64
    } else {
        (k as f64 - n as f64) / n as f64
    }
}

/// Low-pass gains on the `(frames, width, height)` DFT grid, row-major.
pub fn lowpass_mask(frames: usize, width: usize, height: usize, spec: &FreqFilterSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    if frames == 0 || width == 0 || height == 0 {
        return Err(Error::Shape("mask dims must be >= 1".into()));
    }
    let mut mask = Vec::with_capacity(frames * width * height);
    for f in 0..frames {
        let ft = bin_frequency(f, frames) / spec.temporal_cutoff;
        for w in 0..width {
            let fw = bin_frequency(w, width);
            for h in 0..height {
                let fh = bin_frequency(h, height);
                let spatial = (fw * fw + fh * fh).sqrt() / spec.spatial_cutoff;
                let d = (ft * ft + spatial * spatial).sqrt();
                mask.push(butterworth_gain(d, spec.order));
            }
        }
    }
    Ok(mask)
}

/// In-place 3-D DFT over a row-major `[a, b, c]` grid. The inverse is unscaled.
fn fft3(planner: &mut FftPlanner<f64>, data: &mut [Complex64], shape: [usize; 3], inverse: bool) {
    let strides = [shape[1] * shape[2], shape[2], 1];
    for axis in 0..3 {
        let n = shape[axis];
        if n == 1 {
            continue;
        }
        let fft = if inverse {
            planner.plan_fft_inverse(n)
        } else {
            planner.plan_fft_forward(n)
        };
        let stride = strides[axis];
        let mut line = vec![Complex64::default(); n];
        for start in 0..data.len() {
            // Lines start where the index along `axis` is zero.
            if (start / stride) % n != 0 {
                continue;
            }
            for (k, slot) in line.iter_mut().enumerate() {
                *slot = data[start + k * stride];
            }
            fft.process(&mut line);
            for (k, value) in line.iter().enumerate() {
                data[start + k * stride] = *value;
            }
        }
    }
}

fn channel_spectrum(planner: &mut FftPlanner<f64>, v: &LatentVideo, c: usize) -> Vec<Complex64> {
    let d = v.dims();
    let mut buf: Vec<Complex64> = v.channel(c).into_iter().map(|x| Complex64::new(x, 0.0)).collect();
    fft3(planner, &mut buf, [d.frames, d.width, d.height], false);
    buf
}

/// Per-channel spectra of `v`, each on the `(frames, width, height)` grid.
pub fn spectra(v: &LatentVideo) -> Vec<Vec<Complex64>> {
    let mut planner = FftPlanner::new();
    (0..v.dims().channels).map(|c| channel_spectrum(&mut planner, v, c)).collect()
}

/// Keeps `mask` of `low`'s spectrum and `1 - mask` of `high`'s, per channel.
pub fn mix_with_mask(low: &LatentVideo, high: &LatentVideo, mask: &[f64]) -> Result<LatentVideo> {
    low.ensure_same_dims(high)?;
    let d = low.dims();
    let grid = d.frames * d.width * d.height;
    if mask.len() != grid {
        return Err(Error::Length {
            expected: grid,
            found: mask.len(),
        });
    }
    let mut planner = FftPlanner::new();
    let mut out = LatentVideo::zeros(d);
    let scale = 1.0 / grid as f64;
    for c in 0..d.channels {
        let a = channel_spectrum(&mut planner, low, c);
        let b = channel_spectrum(&mut planner, high, c);
        let mut mixed: Vec<Complex64> = a
            .iter()
            .zip(&b)
            .zip(mask)
            .map(|((&x, &y), &m)| x * m + y * (1.0 - m))
            .collect();
        fft3(&mut planner, &mut mixed, [d.frames, d.width, d.height], true);
        let peak = mixed.iter().fold(1.0f64, |acc, z| acc.max(z.re.abs() * scale));
        for (i, z) in mixed.iter().enumerate() {
            let (re, im) = (z.re * scale, z.im * scale);
            if im.abs() > IMAG_TOLERANCE * peak {
                return Err(Error::Numeric(format!(
                    "inverse transform left imaginary residue {im} in channel {c}"
                )));
            }
            let (f, rest) = (i / (d.width * d.height), i % (d.width * d.height));
            out.set(f, rest / d.height, rest % d.height, c, re);
        }
    }
    Ok(out)
}

/// Low band of `renoised` plus high band of `fresh_noise`.
pub fn freq_mix(renoised: &LatentVideo, fresh_noise: &LatentVideo, spec: &FreqFilterSpec) -> Result<LatentVideo> {
    renoised.ensure_same_dims(fresh_noise)?;
    let d = renoised.dims();
    let mask = lowpass_mask(d.frames, d.width, d.height, spec)?;
    mix_with_mask(renoised, fresh_noise, &mask)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FreeInitConfig {
    pub rounds: usize,
    pub filter: FreqFilterSpec,
    /// Interpolation time the clean latent is pushed back to before mixing.
    pub renoise_t: f64,
}

impl Default for FreeInitConfig {
    fn default() -> Self {
        Self {
            rounds: 2,
            filter: FreqFilterSpec::default(),
            renoise_t: 0.98,
        }
    }
}

fn seeded_noise(dims: Dims, seed: u64, stream: u64, round: usize) -> LatentVideo {
    let mut rng = SeededRng::derived(seed, stream.wrapping_add(round as u64));
    LatentVideo::from_fn(dims, |_, _, _, _| rng.normal())
}

/// Unguided sampling repeated `rounds` times, each later round restarting
/// from a frequency mix of the previous output (re-noised) and fresh noise.
/// Returns the last round's output and trace.
pub fn freeinit_sample<M: VelocityField>(
    model: &M,
    schedule: &NoiseSchedule,
    cfg: &SampleConfig,
    freeinit: &FreeInitConfig,
) -> Result<(LatentVideo, SampleTrace)> {
    if freeinit.rounds == 0 {
        return Err(Error::Domain("rounds must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&freeinit.renoise_t) {
        return Err(Error::Domain(format!("re-noise time {} outside [0, 1]", freeinit.renoise_t)));
    }
    freeinit.filter.validate()?;
    let plain = SampleConfig { guidance: None, ..cfg.clone() };
    let mut out = sample_from(model, schedule, initial_noise(cfg.dims, cfg.seed), &plain)?;
    for round in 1..freeinit.rounds {
        let t = freeinit.renoise_t;
        let eps = seeded_noise(cfg.dims, cfg.seed, RENOISE_STREAM, round);
        let renoised = out.0.lincomb(1.0 - t, &eps, t)?;
        let fresh = seeded_noise(cfg.dims, cfg.seed, FRESH_STREAM, round);
        let start = freq_mix(&renoised, &fresh, &freeinit.filter)?;
        out = sample_from(model, schedule, start, &plain)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, Condition, ToyVelocityModel};
    use crate::sampler::{sample, StepStrategy};
    use proptest::prelude::*;

    fn random(dims: Dims, seed: u64) -> LatentVideo {
        let mut rng = SeededRng::new(seed);
        LatentVideo::from_vec(dims, rng.normal_vec(dims.len())).unwrap()
    }

    /// Direct O(n^2) DFT over the whole grid.
    fn naive_dft(x: &[f64], shape: [usize; 3]) -> Vec<Complex64> {
        let [a, b, c] = shape;
        let mut out = vec![Complex64::default(); a * b * c];
        for k0 in 0..a {
            for k1 in 0..b {
                for k2 in 0..c {
                    let mut acc = Complex64::default();
                    for n0 in 0..a {
                        for n1 in 0..b {
                            for n2 in 0..c {
                                let phase = -2.0
                                    * std::f64::consts::PI
                                    * ((k0 * n0) as f64 / a as f64
                                        + (k1 * n1) as f64 / b as f64
                                        + (k2 * n2) as f64 / c as f64);
                                acc += Complex64::from_polar(1.0, phase) * x[(n0 * b + n1) * c + n2];
                            }
                        }
                    }
                    out[(k0 * b + k1) * c + k2] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn gain_endpoints() {
        assert_eq!(butterworth_gain(0.0, 4), 1.0);
        assert_eq!(butterworth_gain(1.0, 4), 0.5);
        assert_eq!(butterworth_gain(1.0, 1), 0.5);
    }

    #[test]
    fn bin_frequencies() {
        let f: Vec<f64> = (0..4).map(|k| bin_frequency(k, 4)).collect();
        assert_eq!(f, vec![0.0, 0.25, -0.5, -0.25]);
        let g: Vec<f64> = (0..5).map(|k| bin_frequency(k, 5)).collect();
        assert_eq!(g, vec![0.0, 0.2, 0.4, -0.4, -0.2]);
    }

    #[test]
    fn mask_matches_per_bin_formula() {
        let spec = FreqFilterSpec::default();
        let (nf, nw, nh) = (8, 16, 16);
        let mask = lowpass_mask(nf, nw, nh, &spec).unwrap();
        for f in 0..nf {
            for w in 0..nw {
                for h in 0..nh {
                    // fftfreq-style frequencies written out independently.
                    let signed = |k: usize, n: usize| {
                        let k = k as i64;
                        let n = n as i64;
                        (if k <= (n - 1) / 2 { k } else { k - n }) as f64 / n as f64
                    };
                    let ft = signed(f, nf) / 0.25;
                    let fs = (signed(w, nw).powi(2) + signed(h, nh).powi(2)).sqrt() / 0.25;
                    let d2: f64 = ft * ft + fs * fs;
                    let expect = 1.0 / (1.0 + d2.powi(4));
                    let got = mask[(f * nw + w) * nh + h];
                    assert!((got - expect).abs() <= 1e-12, "bin ({f},{w},{h}): {got} vs {expect}");
                }
            }
        }
        assert_eq!(mask[0], 1.0);
    }

    #[test]
    fn mask_rejects_bad_spec() {
        for spec in [
            FreqFilterSpec { order: 0, ..Default::default() },
            FreqFilterSpec { spatial_cutoff: 0.0, ..Default::default() },
            FreqFilterSpec { temporal_cutoff: 1.5, ..Default::default() },
        ] {
            assert!(lowpass_mask(4, 4, 4, &spec).is_err());
        }
    }

    #[test]
    fn fft_matches_naive_dft() {
        let d = Dims::new(3, 4, 5, 1).unwrap();
        let v = random(d, 1);
        let got = &spectra(&v)[0];
        let expect = naive_dft(&v.channel(0), [3, 4, 5]);
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).norm() < 1e-10);
        }
    }

    #[test]
    fn all_pass_mask_returns_input() {
        let d = Dims::new(4, 6, 6, 2).unwrap();
        let z = random(d, 2);
        let n = random(d, 3);
        let spec = FreqFilterSpec { order: 200, spatial_cutoff: 1.0, temporal_cutoff: 1.0 };
        let out = freq_mix(&z, &n, &spec).unwrap();
        assert!(out.max_abs_diff(&z).unwrap() < 1e-8);
    }

    #[test]
    fn mixing_identical_signals_is_identity() {
        let d = Dims::new(5, 6, 7, 3).unwrap();
        let z = random(d, 4);
        let out = freq_mix(&z, &z, &FreqFilterSpec::default()).unwrap();
        assert!(out.max_abs_diff(&z).unwrap() < 1e-10);
    }

    #[test]
    fn spectrum_of_mix_is_bin_wise_blend() {
        let d = Dims::new(4, 8, 8, 2).unwrap();
        let z = random(d, 5);
        let n = random(d, 6);
        let spec = FreqFilterSpec::default();
        let mask = lowpass_mask(4, 8, 8, &spec).unwrap();
        let out = freq_mix(&z, &n, &spec).unwrap();
        let (so, sz, sn) = (spectra(&out), spectra(&z), spectra(&n));
        for c in 0..2 {
            for i in 0..mask.len() {
                let expect = sz[c][i] * mask[i] + sn[c][i] * (1.0 - mask[i]);
                assert!((so[c][i] - expect).norm() < 1e-8);
            }
        }
    }

    #[test]
    fn hard_mask_splits_band_energy() {
        let d = Dims::new(4, 8, 8, 2).unwrap();
        let z = random(d, 7);
        let n = random(d, 8);
        let soft = lowpass_mask(4, 8, 8, &FreqFilterSpec::default()).unwrap();
        let hard: Vec<f64> = soft.iter().map(|&m| if m >= 0.5 { 1.0 } else { 0.0 }).collect();
        let out = mix_with_mask(&z, &n, &hard).unwrap();
        let energy = |s: &[Complex64], keep: bool| -> f64 {
            s.iter()
                .zip(&hard)
                .filter(|(_, &m)| (m == 1.0) == keep)
                .map(|(x, _)| x.norm_sqr())
                .sum()
        };
        let (so, sz, sn) = (spectra(&out), spectra(&z), spectra(&n));
        for c in 0..2 {
            let low = energy(&sz[c], true);
            let high = energy(&sn[c], false);
            assert!((energy(&so[c], true) - low).abs() <= 1e-8 * low.max(1.0));
            assert!((energy(&so[c], false) - high).abs() <= 1e-8 * high.max(1.0));
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = random(Dims::new(2, 4, 4, 1).unwrap(), 1);
        let b = random(Dims::new(2, 4, 5, 1).unwrap(), 1);
        assert!(matches!(freq_mix(&a, &b, &FreqFilterSpec::default()), Err(Error::Shape(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn mask_in_unit_interval_and_symmetric(
            f in 1usize..7, w in 1usize..7, h in 1usize..7,
            order in 1u32..8, ds in 0.05f64..1.0, dt in 0.05f64..1.0,
        ) {
            let spec = FreqFilterSpec { order, spatial_cutoff: ds, temporal_cutoff: dt };
            let m = lowpass_mask(f, w, h, &spec).unwrap();
            prop_assert_eq!(m[0], 1.0);
            for a in 0..f { for b in 0..w { for c in 0..h {
                let v = m[(a * w + b) * h + c];
                prop_assert!((0.0..=1.0).contains(&v));
                let neg = m[(((f - a) % f) * w + (w - b) % w) * h + (h - c) % h];
                prop_assert_eq!(v, neg);
            }}}
        }

        #[test]
        fn output_is_real_for_random_inputs(seed in any::<u64>()) {
            let d = Dims::new(3, 5, 4, 2).unwrap();
            prop_assert!(freq_mix(&random(d, seed), &random(d, seed ^ 1), &FreqFilterSpec::default()).is_ok());
        }
    }

    fn small_model() -> (ToyVelocityModel, NoiseSchedule, SampleConfig) {
        let arch = Architecture::default();
        let model = ToyVelocityModel::init(arch, 3).unwrap();
        let schedule = NoiseSchedule::uniform(6, StepStrategy::Euler).unwrap();
        let cfg = SampleConfig::new(Dims::new(4, 6, 6, 4).unwrap(), Condition::Label(1), 2.0, 17);
        (model, schedule, cfg)
    }

    #[test]
    fn one_round_is_plain_sampling() {
        let (model, schedule, cfg) = small_model();
        let once = freeinit_sample(&model, &schedule, &cfg, &FreeInitConfig { rounds: 1, ..Default::default() }).unwrap();
        let plain = sample(&model, &schedule, &cfg).unwrap();
        assert_eq!(once.0, plain.0);
        assert_eq!(once.1.rows, plain.1.rows);
    }

    #[test]
    fn two_rounds_are_deterministic_and_differ() {
        let (model, schedule, cfg) = small_model();
        let fi = FreeInitConfig::default();
        let a = freeinit_sample(&model, &schedule, &cfg, &fi).unwrap().0;
        let b = freeinit_sample(&model, &schedule, &cfg, &fi).unwrap().0;
        assert_eq!(a, b);
        let (plain, _) = sample(&model, &schedule, &cfg).unwrap();
        assert_ne!(a, plain);
    }

    #[test]
    fn zero_rounds_rejected() {
        let (model, schedule, cfg) = small_model();
        let fi = FreeInitConfig { rounds: 0, ..Default::default() };
        assert!(matches!(freeinit_sample(&model, &schedule, &cfg, &fi), Err(Error::Domain(_))));
    }
}
