//! Flow-matching video latents with variance-based motion guidance.
//!
//! The crate trains a small velocity-field network on synthetic latent videos,
//! samples it with classifier-free guidance, and optionally refines the noisy
//! latent at early steps by descending the largest patch-wise temporal
//! variance of the frame-differenced velocity. A frequency-mixing
//! re-initialization baseline and the diagnostics used to compare them live
//! alongside.

pub mod error;
pub mod experiments;
pub mod freeinit;
pub mod guidance;
pub mod model;
pub mod optim;
pub mod rng;
pub mod sampler;
pub mod stats;
pub mod synth;
pub mod tensor;
pub mod visualize;

pub use error::{Error, Result};
