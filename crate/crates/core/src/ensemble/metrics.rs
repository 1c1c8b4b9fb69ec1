use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn accuracy<T: Scalar>(outputs: &Matrix<T>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| outputs.argmax_row(i) == y)
        .count();
    correct as f64 / labels.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub ece: f64,
    pub bins: usize,
    pub per_bin: Vec<CalibrationBin>,
}

impl CalibrationReport {
    /// `Σ_b (count_b / n)·|acc_b − conf_b|` from the per-bin rows.
    pub fn recompute(&self) -> f64 {
        let n: usize = self.per_bin.iter().map(|b| b.count).sum();
        if n == 0 {
            return 0.0;
        }
        self.per_bin
            .iter()
            .map(|b| b.count as f64 / n as f64 * (b.accuracy - b.mean_confidence).abs())
            .sum()
    }
}

/// Index of the right-closed bin `((b)/M, (b+1)/M]` holding `confidence`.
fn bin_index(confidence: f64, bins: usize) -> usize {
    let m = bins as f64;
    let mut b = ((confidence * m).ceil() as usize).clamp(1, bins) - 1;
    // the product can round across an edge; settle against the exact edges
    while b > 0 && confidence <= b as f64 / m {
        b -= 1;
    }
    while b + 1 < bins && confidence > (b + 1) as f64 / m {
        b += 1;
    }
    b
}

/// Compensated summation step; keeps per-bin confidence sums correctly
/// rounded for the sample counts seen here.
fn neumaier_add(sum: &mut f64, carry: &mut f64, x: f64) {
    let t = *sum + x;
    if sum.abs() >= x.abs() {
        *carry += (*sum - t) + x;
    } else {
        *carry += (x - t) + *sum;
    }
    *sum = t;
}

/// Expected calibration error over `bins` equal-width, right-closed bins on (0, 1].
pub fn ece<T: Scalar>(probabilities: &Matrix<T>, labels: &[usize], bins: usize) -> Result<CalibrationReport> {
    if bins == 0 {
        return Err(Error::Config("ECE needs at least one bin".into()));
    }
    if probabilities.rows() != labels.len() {
        return Err(Error::dim("ece", probabilities.shape(), (labels.len(), probabilities.cols())));
    }
    let mut counts = vec![0usize; bins];
    let mut conf_sums = vec![0.0f64; bins];
    let mut conf_carry = vec![0.0f64; bins];
    let mut correct = vec![0usize; bins];
    for (i, &y) in labels.iter().enumerate() {
        let row = probabilities.row(i);
        let total: f64 = row.iter().map(|v| v.as_f64()).sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!("row {i} sums to {total}, not 1")));
        }
        let pred = probabilities.argmax_row(i);
        let confidence = row[pred].as_f64();
        let b = bin_index(confidence, bins);
        counts[b] += 1;
        neumaier_add(&mut conf_sums[b], &mut conf_carry[b], confidence);
        if pred == y {
            correct[b] += 1;
        }
    }
    let n = labels.len().max(1) as f64;
    let mut per_bin = Vec::with_capacity(bins);
    let mut total = 0.0;
    for b in 0..bins {
        let (mean_confidence, acc) = if counts[b] == 0 {
            (0.0, 0.0)
        } else {
            (
                (conf_sums[b] + conf_carry[b]) / counts[b] as f64,
                correct[b] as f64 / counts[b] as f64,
            )
        };
        if counts[b] > 0 {
            total += counts[b] as f64 / n * (acc - mean_confidence).abs();
        }
        per_bin.push(CalibrationBin {
            lo: b as f64 / bins as f64,
            hi: (b + 1) as f64 / bins as f64,
            count: counts[b],
            mean_confidence,
            accuracy: acc,
        });
    }
    Ok(CalibrationReport {
        ece: total,
        bins,
        per_bin,
    })
}
