use serde::{Deserialize, Serialize};

use crate::ensemble::metrics::{accuracy, ece, CalibrationReport};
use crate::error::{Error, Result};
use crate::harness::data::Dataset;
use crate::lora::{check_rate, sample_instances, MaskKey};
use crate::scalar::Scalar;
use crate::tensor::{cross_entropy_forward, Matrix};
use crate::training::Model;

/// Where the instance outputs are averaged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    /// Average pre-softmax activations, then apply softmax.
    #[default]
    Logits,
    /// Average per-instance softmax outputs.
    Probabilities,
}

#[derive(Clone, Debug)]
pub struct EnsembleOutput<T> {
    pub mean: Matrix<T>,
    pub instances: Vec<Matrix<T>>,
    pub domain: Domain,
}

impl<T: Scalar> EnsembleOutput<T> {
    /// Averages already-computed instance outputs in the given domain.
    /// For [`Domain::Probabilities`] the instances are logits and are
    /// softmaxed before averaging.
    pub fn aggregate(logits: Vec<Matrix<T>>, domain: Domain) -> Result<Self> {
        let Some(shape) = logits.first().map(Matrix::shape) else {
            return Err(Error::Config("ensemble needs at least one instance".into()));
        };
        let instances: Vec<Matrix<T>> = match domain {
            Domain::Logits => logits,
            Domain::Probabilities => logits.iter().map(Matrix::softmax_rows).collect(),
        };
        let mut sum = Matrix::zeros(shape.0, shape.1);
        for o in &instances {
            sum.add_assign(o)?;
        }
        let mean = sum.scale(T::one() / T::of(instances.len() as f64));
        Ok(EnsembleOutput {
            mean,
            instances,
            domain,
        })
    }

    pub fn probabilities(&self) -> Matrix<T> {
        match self.domain {
            Domain::Logits => self.mean.softmax_rows(),
            Domain::Probabilities => self.mean.clone(),
        }
    }

    /// Cross-entropy of the aggregated output.
    pub fn loss(&self, labels: &[usize]) -> T {
        match self.domain {
            Domain::Logits => cross_entropy_forward(&self.mean, labels).0,
            Domain::Probabilities => nll(&self.mean, labels),
        }
    }

    /// Mean of the per-instance cross-entropies.
    pub fn mean_instance_loss(&self, labels: &[usize]) -> T {
        let total: T = self
            .instances
            .iter()
            .map(|o| match self.domain {
                Domain::Logits => cross_entropy_forward(o, labels).0,
                Domain::Probabilities => nll(o, labels),
            })
            .sum();
        total / T::of(self.instances.len() as f64)
    }
}

/// Mean negative log-likelihood of probability rows.
pub fn nll<T: Scalar>(probs: &Matrix<T>, labels: &[usize]) -> T {
    let tiny = T::min_positive_value();
    let total: T = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs[(i, y)].max(tiny).ln())
        .sum();
    total / T::of(labels.len().max(1) as f64)
}

/// Test-time dropout ensemble: `N` fresh mask sets, `N` masked forwards, averaged.
pub fn ensemble_predict<T: Scalar>(
    model: &Model<T>,
    x: &Matrix<T>,
    p: f64,
    n: usize,
    key: MaskKey,
    domain: Domain,
) -> Result<EnsembleOutput<T>> {
    if n == 0 {
        return Err(Error::Config("instance count N must be at least 1".into()));
    }
    check_rate(p)?;
    let masks = sample_instances(&model.adapter_shapes(), p, key, n)?;
    let logits = masks
        .iter()
        .map(|m| model.logits(x, Some(m)))
        .collect::<Result<Vec<_>>>()?;
    EnsembleOutput::aggregate(logits, domain)
}

/// How a model is evaluated: ensemble size and rate, aggregation domain and
/// ECE binning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSettings {
    pub p: f64,
    pub instances: usize,
    #[serde(default)]
    pub domain: Domain,
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default = "default_eval_batch")]
    pub batch_size: usize,
}

fn default_bins() -> usize {
    10
}

fn default_eval_batch() -> usize {
    256
}

impl EnsembleSettings {
    /// Single unmasked forward.
    pub fn plain() -> Self {
        EnsembleSettings {
            p: 0.0,
            instances: 1,
            domain: Domain::Logits,
            bins: default_bins(),
            batch_size: default_eval_batch(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub n: usize,
    pub calibration: CalibrationReport,
}

/// Ensemble evaluation over a dataset; masks are redrawn for every batch
/// from `seed`.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    data: &Dataset<T>,
    settings: &EnsembleSettings,
    seed: u64,
) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty dataset".into()));
    }
    let batch = settings.batch_size.max(1);
    let mut probs = Vec::with_capacity(data.len() * model.classes());
    let mut weighted_loss = 0.0;
    let unmasked = settings.p == 0.0 && settings.instances == 1;
    for (b, start) in (0..data.len()).step_by(batch).enumerate() {
        let idx: Vec<usize> = (start..(start + batch).min(data.len())).collect();
        let x = data.features.select_rows(&idx);
        let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        let out = if unmasked {
            EnsembleOutput::aggregate(vec![model.logits(&x, None)?], settings.domain)?
        } else {
            ensemble_predict(model, &x, settings.p, settings.instances, MaskKey::eval(seed, 0, b), settings.domain)?
        };
        weighted_loss += out.loss(&labels).as_f64() * labels.len() as f64;
        probs.extend(out.probabilities().into_vec());
    }
    let probs = Matrix::from_vec(data.len(), model.classes(), probs)?;
    Ok(Evaluation {
        loss: weighted_loss / data.len() as f64,
        accuracy: accuracy(&probs, &data.labels),
        n: data.len(),
        calibration: ece(&probs, &data.labels, settings.bins)?,
    })
}
