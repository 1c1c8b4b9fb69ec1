//! Synthetic classification tasks with a controllable pretrain → fine-tune shift.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, LabRng};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Pretrain,
    PretrainTest,
    FinetuneTrain,
    FinetuneTest,
}

impl Split {
    pub fn is_finetune(self) -> bool {
        matches!(self, Split::FinetuneTrain | Split::FinetuneTest)
    }

    fn tag(self) -> u64 {
        match self {
            Split::Pretrain => rng::tag("pretrain"),
            Split::PretrainTest => rng::tag("pretrain-test"),
            Split::FinetuneTrain => rng::tag("finetune-train"),
            Split::FinetuneTest => rng::tag("finetune-test"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataKind {
    Blobs,
    TwoMoons,
}

/// Everything needed to regenerate one split bit-identically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub kind: DataKind,
    pub classes: usize,
    pub dim: usize,
    pub n: usize,
    /// Standard deviation of the isotropic Gaussian noise.
    pub noise: f64,
    /// Distance of blob centers from the origin (moons: overall scale).
    pub center_scale: f64,
    /// Rotation in radians applied to each coordinate plane `(2k, 2k+1)`
    /// of the fine-tune distribution.
    pub shift_angle: f64,
    /// Translation along the all-ones direction applied to the fine-tune distribution.
    pub shift_translation: f64,
    pub split: Split,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub features: Matrix<T>,
    pub labels: Vec<usize>,
    pub spec: GeneratorSpec,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    pub fn select(&self, indices: &[usize]) -> Dataset<T> {
        Dataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            spec: self.spec.clone(),
        }
    }

    /// Copy with sample `i` removed.
    pub fn without(&self, i: usize) -> Dataset<T> {
        let keep: Vec<usize> = (0..self.len()).filter(|&k| k != i).collect();
        self.select(&keep)
    }
}

fn gaussian(rng: &mut LabRng) -> f64 {
    StandardNormal.sample(rng)
}

fn shift(point: &mut [f64], angle: f64, translation: f64) {
    let (s, c) = angle.sin_cos();
    for pair in point.chunks_exact_mut(2) {
        let (x, y) = (pair[0], pair[1]);
        pair[0] = c * x - s * y;
        pair[1] = s * x + c * y;
    }
    let t = translation / (point.len() as f64).sqrt();
    for v in point.iter_mut() {
        *v += t;
    }
}

/// Unit-direction class centers scaled to `center_scale`, shared by all splits.
fn blob_centers(spec: &GeneratorSpec) -> Vec<Vec<f64>> {
    let mut rng = rng::rng_from(&[spec.seed, rng::tag("blob-centers")]);
    (0..spec.classes)
        .map(|_| {
            let mut c: Vec<f64> = (0..spec.dim).map(|_| gaussian(&mut rng)).collect();
            let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            for v in &mut c {
                *v *= spec.center_scale / norm;
            }
            c
        })
        .collect()
}

fn moon_point(label: usize, rng: &mut LabRng) -> [f64; 2] {
    let t = rng.random_range(0.0..std::f64::consts::PI);
    if label == 0 {
        [t.cos(), t.sin()]
    } else {
        [1.0 - t.cos(), 0.5 - t.sin()]
    }
}

/// Deterministic Gaussian-blob or two-moons data for one split.
///
/// Labels cycle through the classes so every split is balanced. Fine-tune
/// splits are the pretrain distribution rotated and translated by the
/// configured shift; with zero shift both distributions coincide.
pub fn generate_dataset<T: Scalar>(spec: &GeneratorSpec) -> Result<Dataset<T>> {
    if spec.classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {}", spec.classes)));
    }
    if spec.dim == 0 || spec.n == 0 {
        return Err(Error::Config("dataset needs positive dim and n".into()));
    }
    if !(spec.noise >= 0.0) {
        return Err(Error::Config(format!("noise {} must be non-negative", spec.noise)));
    }
    let centers = match spec.kind {
        DataKind::Blobs => blob_centers(spec),
        DataKind::TwoMoons => {
            if spec.classes != 2 {
                return Err(Error::Config("two-moons data has exactly 2 classes".into()));
            }
            if spec.dim < 2 {
                return Err(Error::Config("two-moons data needs dim >= 2".into()));
            }
            Vec::new()
        }
    };
    let mut rng = rng::rng_from(&[spec.seed, spec.split.tag()]);
    let mut data = Vec::with_capacity(spec.n * spec.dim);
    let mut labels = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let label = i % spec.classes;
        let mut point = match spec.kind {
            DataKind::Blobs => centers[label].clone(),
            DataKind::TwoMoons => {
                let [x, y] = moon_point(label, &mut rng);
                let mut p = vec![0.0; spec.dim];
                p[0] = (x - 0.5) * spec.center_scale;
                p[1] = (y - 0.25) * spec.center_scale;
                p
            }
        };
        for v in point.iter_mut() {
            *v += spec.noise * gaussian(&mut rng);
        }
        if spec.split.is_finetune() {
            shift(&mut point, spec.shift_angle, spec.shift_translation);
        }
        data.extend(point.into_iter().map(T::of));
        labels.push(label);
    }
    Ok(Dataset {
        features: Matrix::from_vec(spec.n, spec.dim, data)?,
        labels,
        spec: spec.clone(),
    })
}
