//! Monte Carlo check of `E‖d⊙Δθ‖² = (2p−p²)‖Δθ‖²`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{check_rate, entry_zero_probability};
use crate::rng::LabRng;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskedNormReport {
    pub p: f64,
    pub draws: usize,
    pub dim: usize,
    pub mc_estimate: f64,
    pub closed_form: f64,
    /// `|mc − closed| / closed`, or the absolute error when `closed` is 0.
    pub rel_error: f64,
    /// Standard error of the mean implied by independent entries:
    /// `√(q(1−q)·Σδᵢ⁴ / draws)` with `q = 2p − p²`.
    pub std_error: f64,
    /// Sample standard error of the per-draw values.
    pub sample_std_error: f64,
}

impl MaskedNormReport {
    /// Absolute error in units of the analytic standard error.
    pub fn z_score(&self) -> f64 {
        let err = (self.mc_estimate - self.closed_form).abs();
        if self.std_error > 0.0 {
            err / self.std_error
        } else if err == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    }
}

/// Averages `‖d⊙Δθ‖²` over `draws` masks with `d_i ~ Bernoulli(2p − p²)`,
/// where `d_i = 1` marks a dropped entry.
pub fn mc_masked_norm_check<T: Scalar>(delta: &[T], p: f64, draws: usize, rng: &mut LabRng) -> Result<MaskedNormReport> {
    check_rate(p)?;
    if draws == 0 {
        return Err(Error::Config("need at least one Monte Carlo draw".into()));
    }
    let q = entry_zero_probability(p);
    let squares: Vec<f64> = delta.iter().map(|v| v.as_f64() * v.as_f64()).collect();
    let norm2: f64 = squares.iter().sum();
    let fourth: f64 = squares.iter().map(|s| s * s).sum();
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..draws {
        let value: f64 = squares
            .iter()
            .filter(|_| rng.random::<f64>() < q)
            .sum();
        sum += value;
        sum_sq += value * value;
    }
    let n = draws as f64;
    let mc = sum / n;
    let closed = q * norm2;
    let sample_var = if draws > 1 {
        ((sum_sq - n * mc * mc) / (n - 1.0)).max(0.0)
    } else {
        0.0
    };
    let rel_error = if closed != 0.0 {
        (mc - closed).abs() / closed
    } else {
        (mc - closed).abs()
    };
    Ok(MaskedNormReport {
        p,
        draws,
        dim: delta.len(),
        mc_estimate: mc,
        closed_form: closed,
        rel_error,
        std_error: (q * (1.0 - q) * fourth / n).sqrt(),
        sample_std_error: (sample_var / n).sqrt(),
    })
}
