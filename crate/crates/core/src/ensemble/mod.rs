//! Test-time dropout ensembles and evaluation metrics.

mod metrics;
mod predict;

pub use metrics::{accuracy, ece, CalibrationBin, CalibrationReport};
pub use predict::{ensemble_predict, evaluate, nll, Domain, EnsembleOutput, EnsembleSettings, Evaluation};
