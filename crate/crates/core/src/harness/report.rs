//! CSV and JSON emission with pinned column orders.

use std::path::Path;

use serde::Serialize;

use crate::ensemble::{CalibrationBin, Domain, Evaluation};
use crate::error::{Error, Result};

pub const RUN_COLUMNS: [&str; 7] = ["epoch", "train_loss", "test_loss", "train_acc", "test_acc", "ece", "wall_ms"];
pub const SWEEP_COLUMNS: [&str; 9] = [
    "p",
    "seed",
    "train_loss",
    "test_loss",
    "gap",
    "train_acc",
    "test_acc",
    "ece",
    "diverged",
];
pub const BOUND_COLUMNS: [&str; 2] = ["p", "bound"];
pub const JENSEN_COLUMNS: [&str; 4] = ["trial", "lhs", "rhs", "gap"];
pub const STABILITY_COLUMNS: [&str; 4] = ["lambda", "i", "perturbation", "beta_bound"];
pub const MCNORM_COLUMNS: [&str; 8] = [
    "p",
    "draws",
    "dim",
    "mc_estimate",
    "closed_form",
    "rel_error",
    "std_error",
    "sample_std_error",
];

/// One `(p, seed)` cell of a sweep. Diverged cells carry NaN metrics.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct SweepRow {
    pub p: f64,
    pub seed: u64,
    pub train_loss: f64,
    pub test_loss: f64,
    pub gap: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub ece: f64,
    pub diverged: bool,
}

/// Output of `eval`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub ece: f64,
    pub loss: f64,
    pub n: usize,
    #[serde(rename = "N")]
    pub instances: usize,
    pub p: f64,
    pub domain: Domain,
    pub per_bin: Vec<CalibrationBin>,
}

impl EvalReport {
    pub fn new(eval: &Evaluation, instances: usize, p: f64, domain: Domain) -> Self {
        EvalReport {
            accuracy: eval.accuracy,
            ece: eval.calibration.ece,
            loss: eval.loss,
            n: eval.n,
            instances,
            p,
            domain,
            per_bin: eval.calibration.per_bin.clone(),
        }
    }
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Renders rows under an explicit header, so even an empty table has one.
pub fn csv_string<R: Serialize>(header: &[&str], rows: &[R]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Contract(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Contract(e.to_string()))
}

pub fn write_csv<R: Serialize>(path: &Path, header: &[&str], rows: &[R]) -> Result<()> {
    std::fs::write(path, csv_string(header, rows)?).map_err(|e| Error::io(path, e))
}

pub fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::EpochRow;

    #[test]
    fn run_header_matches_row_fields() {
        let row = EpochRow {
            epoch: 1,
            train_loss: 0.5,
            test_loss: 0.75,
            train_acc: 1.0,
            test_acc: 0.25,
            ece: 0.125,
            wall_ms: 0,
        };
        let text = csv_string(&RUN_COLUMNS, &[row]).unwrap();
        assert_eq!(
            text,
            "epoch,train_loss,test_loss,train_acc,test_acc,ece,wall_ms\n1,0.5,0.75,1.0,0.25,0.125,0\n"
        );
    }

    #[test]
    fn empty_table_keeps_header() {
        let text = csv_string::<SweepRow>(&SWEEP_COLUMNS, &[]).unwrap();
        assert_eq!(text, "p,seed,train_loss,test_loss,gap,train_acc,test_acc,ece,diverged\n");
    }
}
