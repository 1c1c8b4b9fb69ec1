//! Numerical checks of the sparsity-regularization view of LoRA dropout.

pub mod bound;
pub mod jensen;
pub mod linalg;
pub mod mcnorm;
pub mod stability;
pub mod sweep;

pub use bound::{generalization_bound, phs_bound, BoundConstants};
pub use jensen::{jensen_check, JensenReport, JensenRow, JensenSettings};
pub use mcnorm::{mc_masked_norm_check, MaskedNormReport};
pub use stability::{stability_probe, ConvexProblem, LoraSoftmax, PerturbationRow, Quadratic1d, StabilityReport};
pub use sweep::{gap_sweep, BoundRow, GapSweepRecord};
