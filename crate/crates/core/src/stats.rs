//! Two-sample comparison for the diagnostics.

use statrs::function::erf::erfc;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WelchTest {
    pub mean_a: f64,
    pub mean_b: f64,
    pub t: f64,
    /// Welch–Satterthwaite degrees of freedom.
    pub dof: f64,
    /// Two-sided p-value from the standard normal approximation.
    pub p_two_sided: f64,
    /// One-sided p-value for the alternative `mean_a > mean_b`.
    pub p_greater: f64,
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Upper tail of the standard normal.
pub fn normal_sf(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

/// Welch's unequal-variance t-test of `a` against `b`.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<WelchTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Domain("each sample needs at least two values".into()));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::Validation("samples must be finite".into()));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, mb) = (mean(a), mean(b));
    let (qa, qb) = (sample_variance(a) / na, sample_variance(b) / nb);
    let se2 = qa + qb;
    let diff = ma - mb;
    let t = if se2 > 0.0 {
        diff / se2.sqrt()
    } else if diff == 0.0 {
        0.0
    } else {
        diff.signum() * f64::INFINITY
    };
    let dof = if se2 > 0.0 {
        se2 * se2 / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0))
    } else {
        na + nb - 2.0
    };
    Ok(WelchTest {
        mean_a: ma,
        mean_b: mb,
        t,
        dof,
        p_two_sided: (2.0 * normal_sf(t.abs())).min(1.0),
        p_greater: normal_sf(t),
    })
}
