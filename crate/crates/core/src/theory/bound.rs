//! Closed-form stability and generalization bounds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::entry_zero_probability;

/// Pointwise hypothesis stability bound `2η² / ((Λ_min + 2λ(2p−p²))·n)`.
pub fn phs_bound(eta: f64, lambda_min: f64, lambda: f64, p: f64, n: usize) -> f64 {
    let curvature = lambda_min + 2.0 * lambda * entry_zero_probability(p);
    2.0 * eta * eta / (curvature * n as f64)
}

/// Constants for the generalization bound. `c` is the loss-range constant,
/// `delta` the failure probability.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundConstants {
    pub c: f64,
    pub eta: f64,
    pub lambda_min: f64,
    pub lambda: f64,
    pub n: usize,
    pub delta: f64,
}

impl BoundConstants {
    pub fn validate(&self) -> Result<()> {
        let positive = self.c > 0.0 && self.eta >= 0.0 && self.lambda_min >= 0.0 && self.lambda >= 0.0;
        if !positive || self.n == 0 || !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!("invalid bound constants {self:?}")));
        }
        if self.lambda_min == 0.0 && self.lambda == 0.0 {
            return Err(Error::Config("bound needs lambda_min > 0 or lambda > 0".into()));
        }
        Ok(())
    }
}

/// `√((C² + 24Cη²/(Λ_min + 2λ(2p−p²))) / (2nδ))`.
///
/// Non-increasing in `p` on `[0, 1)` since `2p − p²` increases there.
pub fn generalization_bound(k: &BoundConstants, p: f64) -> f64 {
    let curvature = k.lambda_min + 2.0 * k.lambda * entry_zero_probability(p);
    let numerator = k.c * k.c + 24.0 * k.c * k.eta * k.eta / curvature;
    (numerator / (2.0 * k.n as f64 * k.delta)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phs_hand_value() {
        // 2·4 / ((1 + 2·0.5·0.75)·10) = 8 / 17.5
        assert!((phs_bound(2.0, 1.0, 0.5, 0.5, 10) - 8.0 / 17.5).abs() < 1e-15);
    }

    #[test]
    fn doubling_n_halves_phs() {
        let a = phs_bound(1.3, 0.2, 0.7, 0.3, 40);
        let b = phs_bound(1.3, 0.2, 0.7, 0.3, 80);
        assert_eq!(a, 2.0 * b);
    }

    #[test]
    fn generalization_hand_value() {
        let k = BoundConstants {
            c: 2.0,
            eta: 1.0,
            lambda_min: 0.0,
            lambda: 1.0,
            n: 100,
            delta: 0.1,
        };
        // p = 0.5: curvature 1.5, numerator 4 + 48/1.5 = 36, /20 → √1.8
        assert!((generalization_bound(&k, 0.5) - 1.8f64.sqrt()).abs() < 1e-15);
        assert!(generalization_bound(&k, 0.0) > generalization_bound(&k, 0.5));
    }

    #[test]
    fn degenerate_constants_rejected() {
        let k = BoundConstants {
            c: 1.0,
            eta: 1.0,
            lambda_min: 0.0,
            lambda: 0.0,
            n: 10,
            delta: 0.1,
        };
        assert!(k.validate().is_err());
    }
}
