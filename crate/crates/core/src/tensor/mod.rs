//! Dense real tensors for latent videos.
//!
//! A [`LatentVideo`] stores `f64` values row-major with axes ordered
//! `(frames, width, height, channels)`. Arithmetic helpers are pure and return
//! new values; tensors never alias.

mod io;

pub use io::{decode, encode, tensor_read, tensor_write, MAGIC};

use crate::error::{Error, Result};

/// Axis lengths of a latent video, all at least one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
}

impl Dims {
    pub fn new(frames: usize, width: usize, height: usize, channels: usize) -> Result<Self> {
        let dims = Self {
            frames,
            width,
            height,
            channels,
        };
        if dims.as_array().iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("all dims must be >= 1, got {dims}")));
        }
        Ok(dims)
    }

    pub fn len(&self) -> usize {
        self.frames * self.width * self.height * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements in one frame.
    pub fn frame_len(&self) -> usize {
        self.width * self.height * self.channels
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.frames, self.width, self.height, self.channels]
    }

    #[inline]
    pub fn offset(&self, f: usize, w: usize, h: usize, c: usize) -> usize {
        ((f * self.width + w) * self.height + h) * self.channels + c
    }

    pub fn with_frames(&self, frames: usize) -> Self {
        Self { frames, ..*self }
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}x{}x{}x{}",
            self.frames, self.width, self.height, self.channels
        )
    }
}

/// Rank-4 tensor `(F, W, H, C)` holding a latent video or a velocity field.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo {
    dims: Dims,
    data: Vec<f64>,
}

impl LatentVideo {
    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.len()],
        }
    }

    pub fn filled(dims: Dims, value: f64) -> Self {
        Self {
            dims,
            data: vec![value; dims.len()],
        }
    }

    /// Wraps `data`, checking its length and that every value is finite.
    pub fn from_vec(dims: Dims, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::Shape(format!(
                "data length {} does not match dims {dims} ({} elements)",
                data.len(),
                dims.len()
            )));
        }
        let video = Self { dims, data };
        video.check_finite()?;
        Ok(video)
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for fr in 0..dims.frames {
            for w in 0..dims.width {
                for h in 0..dims.height {
                    for c in 0..dims.channels {
                        data.push(f(fr, w, h, c));
                    }
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, f: usize, w: usize, h: usize, c: usize) -> f64 {
        self.data[self.dims.offset(f, w, h, c)]
    }

    #[inline]
    pub fn set(&mut self, f: usize, w: usize, h: usize, c: usize, value: f64) {
        let i = self.dims.offset(f, w, h, c);
        self.data[i] = value;
    }

    pub fn frame(&self, f: usize) -> &[f64] {
        let n = self.dims.frame_len();
        &self.data[f * n..(f + 1) * n]
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Validation(format!(
                "non-finite value {} at flat index {i}",
                self.data[i]
            ))),
        }
    }

    pub fn ensure_same_dims(&self, other: &Self) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!(
                "dims {} and {} differ",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.ensure_same_dims(other)?;
        Ok(Self {
            dims: self.dims,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|v| k * v)
    }

    /// `a * self + b * other`.
    pub fn lincomb(&self, a: f64, other: &Self, b: f64) -> Result<Self> {
        self.zip_map(other, |x, y| a * x + b * y)
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.ensure_same_dims(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn mean_abs(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum::<f64>() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.ensure_same_dims(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Copy of channel `c` as `(F, W, H)` row-major values.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data
            .iter()
            .skip(c)
            .step_by(self.dims.channels)
            .copied()
            .collect()
    }

    /// Frames in reverse order.
    pub fn reversed_frames(&self) -> Self {
        let n = self.dims.frame_len();
        let mut data = Vec::with_capacity(self.data.len());
        for f in (0..self.dims.frames).rev() {
            data.extend_from_slice(&self.data[f * n..(f + 1) * n]);
        }
        Self {
            dims: self.dims,
            data,
        }
    }

    /// Mean absolute difference between consecutive frames.
    pub fn motion_magnitude(&self) -> f64 {
        let n = self.dims.frame_len();
        if self.dims.frames < 2 {
            return 0.0;
        }
        let total: f64 = self.data[n..]
            .iter()
            .zip(&self.data[..self.data.len() - n])
            .map(|(a, b)| (a - b).abs())
            .sum();
        total / ((self.dims.frames - 1) * n) as f64
    }
}

/// Spatial map `(W, H)` of non-negative scores, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl VarianceMap {
    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "variance map {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Validation(format!(
                "variance map entries must be finite and >= 0, found {v}"
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, w: usize, h: usize) -> f64 {
        self.data[w * self.height + h]
    }

    /// Largest entry and its `(w, h)`; ties resolve to the first in row-major order.
    pub fn argmax(&self) -> ((usize, usize), f64) {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        ((best / self.height, best % self.height), self.data[best])
    }

    pub fn max(&self) -> f64 {
        self.argmax().1
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// Population variance along the leading axis of a row-major tensor.
///
/// Returns the reduced shape (`shape[1..]`) and values. Uses two passes
/// (mean, then squared deviations) with a fixed summation order.
pub fn reduce_variance_over_axis0(shape: &[usize], data: &[f64]) -> Result<(Vec<usize>, Vec<f64>)> {
    if shape.is_empty() {
        return Err(Error::Domain("variance needs a tensor of rank >= 1".into()));
    }
    let total: usize = shape.iter().product();
    if total == 0 {
        return Err(Error::Domain("variance of an empty tensor".into()));
    }
    if data.len() != total {
        return Err(Error::Shape(format!(
            "shape {shape:?} needs {total} values, got {}",
            data.len()
        )));
    }
    let n = shape[0];
    let inner = total / n;
    let mut mean = vec![0.0; inner];
    for row in data.chunks_exact(inner) {
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var = vec![0.0; inner];
    for row in data.chunks_exact(inner) {
        for ((v, &m), &x) in var.iter_mut().zip(&mean).zip(row) {
            let d = x - m;
            *v += d * d;
        }
    }
    for v in &mut var {
        *v /= n as f64;
    }
    Ok((shape[1..].to_vec(), var))
}
