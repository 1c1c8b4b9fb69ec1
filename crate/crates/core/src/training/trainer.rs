use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::ensemble::{evaluate, Domain, EnsembleSettings};
use crate::error::{Error, Result};
use crate::harness::data::Dataset;
use crate::lora::{check_rate, sample_instances, MaskKey};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Graph;
use crate::training::model::Model;
use crate::training::objective::{explicit_regularized_loss, multi_instance_loss, task_loss, Batch};
use crate::training::optim::{Optimizer, OptimizerKind};

/// Loss above which a run is declared diverged.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Multi-instance LoRA Dropout objective.
    #[default]
    Dropout,
    /// Unmasked loss plus `λ(2p−p²)‖ΔW‖²`.
    ExplicitReg,
    /// Unmasked loss only.
    Plain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Dropout rate.
    pub p: f64,
    /// Dropout instances per iteration (and per test batch).
    pub instances: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: TrainMode,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub momentum: f64,
    /// Ensemble size used for the per-epoch metrics; defaults to `instances`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_instances: Option<usize>,
    #[serde(default)]
    pub eval_domain: Domain,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 16,
            p: 0.5,
            instances: 4,
            learning_rate: 0.05,
            lambda: 0.0,
            seed: 0,
            mode: TrainMode::Dropout,
            optimizer: OptimizerKind::Sgd,
            momentum: 0.0,
            eval_instances: None,
            eval_domain: Domain::Logits,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_rate(self.p)?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.instances == 0 || self.eval_instances == Some(0) {
            return Err(Error::Config("instance count N must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda {} must be non-negative", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        Ok(())
    }

    /// Evaluation matching the training mode: the dropout ensemble in
    /// dropout mode, a single unmasked forward otherwise.
    pub fn ensemble(&self) -> EnsembleSettings {
        match self.mode {
            TrainMode::Dropout => EnsembleSettings {
                p: self.p,
                instances: self.eval_instances.unwrap_or(self.instances),
                domain: self.eval_domain,
                ..EnsembleSettings::plain()
            },
            TrainMode::ExplicitReg | TrainMode::Plain => EnsembleSettings {
                domain: self.eval_domain,
                ..EnsembleSettings::plain()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub ece: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub rows: Vec<EpochRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
}

impl RunRecord {
    pub fn last(&self) -> Option<&EpochRow> {
        self.rows.last()
    }
}

/// Knobs that do not change the numerical result of a run.
#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Record wall-clock milliseconds per epoch (otherwise 0, keeping the
    /// record reproducible byte for byte).
    pub wall_clock: bool,
}

/// Evaluation seed for one epoch and split; kept apart from the training streams.
fn eval_seed(seed: u64, epoch: usize, split: &str) -> u64 {
    rng::derive_seed(&[seed, rng::tag("epoch-eval"), epoch as u64, rng::tag(split)])
}

/// Minibatch training of the trainable parameters.
///
/// Each epoch shuffles the training set and walks it in batches of
/// `batch_size`. In dropout mode every iteration draws `N` mask sets,
/// shared by the whole batch, and steps on the mean of the `N` masked
/// losses. Metrics are recorded after every epoch with the ensemble from
/// [`TrainConfig::ensemble`].
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    train_set: &Dataset<T>,
    test_set: &Dataset<T>,
    config: &TrainConfig,
    options: RunOptions,
) -> Result<RunRecord> {
    config.validate()?;
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Error::Config("training and test sets must be non-empty".into()));
    }
    let mut optimizer = Optimizer::<T>::new(config.optimizer, config.learning_rate, config.momentum);
    let shapes = model.adapter_shapes();
    let ensemble = config.ensemble();
    let n = train_set.len();
    let iterations = n.div_ceil(config.batch_size);
    let mut rows = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::rng_from(&[config.seed, rng::tag("shuffle"), epoch as u64]));

        for it in 0..iterations {
            let idx = &order[it * config.batch_size..((it + 1) * config.batch_size).min(n)];
            let x = train_set.features.select_rows(idx);
            let labels: Vec<usize> = idx.iter().map(|&i| train_set.labels[i]).collect();
            let batch = Batch { x: &x, labels: &labels };

            let mut g = Graph::new();
            let bound = model.bind(&mut g);
            let loss = match config.mode {
                TrainMode::Dropout => {
                    let masks = sample_instances(&shapes, config.p, MaskKey::train(config.seed, epoch, it), config.instances)?;
                    multi_instance_loss(model, &mut g, &bound, batch, &masks)?
                }
                TrainMode::ExplicitReg => {
                    explicit_regularized_loss(model, &mut g, &bound, batch, config.lambda, config.p)?
                }
                TrainMode::Plain => task_loss(model, &mut g, &bound, batch)?,
            };
            let value = g.scalar(loss).as_f64();
            if !value.is_finite() || value > DIVERGENCE_THRESHOLD {
                return Err(Error::Divergence {
                    epoch,
                    iteration: it,
                    loss: value,
                });
            }
            g.backward(loss)?;
            let grads = model.trainable_grads(&g, &bound);
            optimizer.step(&mut model.trainable_mut(), &grads)?;
        }

        let train_eval = evaluate(model, train_set, &ensemble, eval_seed(config.seed, epoch, "train"))?;
        let test_eval = evaluate(model, test_set, &ensemble, eval_seed(config.seed, epoch, "test"))?;
        if !train_eval.loss.is_finite() || !test_eval.loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                iteration: iterations,
                loss: if train_eval.loss.is_finite() { test_eval.loss } else { train_eval.loss },
            });
        }
        rows.push(EpochRow {
            epoch,
            train_loss: train_eval.loss,
            test_loss: test_eval.loss,
            train_acc: train_eval.accuracy,
            test_acc: test_eval.accuracy,
            ece: test_eval.calibration.ece,
            wall_ms: if options.wall_clock {
                started.elapsed().as_millis() as u64
            } else {
                0
            },
        });
    }
    Ok(RunRecord {
        config: config.clone(),
        rows,
        checkpoint: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::data::{generate_dataset, DataKind, GeneratorSpec, Split};
    use crate::rng::rng_from;
    use crate::training::{AdapterKind, HeadMode, ModelSpec};

    fn blobs(split: Split, n: usize, noise: f64) -> Dataset<f64> {
        generate_dataset(&GeneratorSpec {
            kind: DataKind::Blobs,
            classes: 2,
            dim: 4,
            n,
            noise,
            center_scale: 3.0,
            shift_angle: 0.0,
            shift_translation: 0.0,
            split,
            seed: 5,
        })
        .unwrap()
    }

    fn small_model() -> Model<f64> {
        let spec = ModelSpec {
            input_dim: 4,
            hidden: vec![8],
            classes: 2,
        };
        let mut rng = rng_from(&[31]);
        let base = Model::dense(&spec, &mut rng).unwrap();
        Model::with_adapters(&base, AdapterKind::Lora, 2, 1.0, HeadMode::Adapter, &mut rng).unwrap()
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let mut model = small_model();
        let before = model.clone();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let rec = train(&mut model, &blobs(Split::Pretrain, 20, 0.5), &blobs(Split::PretrainTest, 20, 0.5), &cfg, RunOptions::default()).unwrap();
        assert!(rec.rows.is_empty());
        assert_eq!(model, before);
    }

    #[test]
    fn plain_mode_separates_blobs() {
        let spec = ModelSpec {
            input_dim: 4,
            hidden: vec![8],
            classes: 2,
        };
        let mut model = Model::dense(&spec, &mut rng_from(&[32])).unwrap();
        let cfg = TrainConfig {
            epochs: 50,
            mode: TrainMode::Plain,
            learning_rate: 0.05,
            ..TrainConfig::default()
        };
        let rec = train(&mut model, &blobs(Split::Pretrain, 64, 0.5), &blobs(Split::PretrainTest, 64, 0.5), &cfg, RunOptions::default()).unwrap();
        assert_eq!(rec.rows.len(), 50);
        assert_eq!(rec.last().unwrap().train_acc, 1.0);
    }

    #[test]
    fn identical_seeds_bit_identical_records() {
        let cfg = TrainConfig {
            epochs: 5,
            ..TrainConfig::default()
        };
        let run = || {
            let mut model = small_model();
            let rec = train(&mut model, &blobs(Split::Pretrain, 40, 1.0), &blobs(Split::PretrainTest, 40, 1.0), &cfg, RunOptions::default()).unwrap();
            (rec, model)
        };
        let (a, ma) = run();
        let (b, mb) = run();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
        let bits = |r: &RunRecord| r.rows.iter().map(|row| row.train_loss.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn frozen_weights_and_snapshot_untouched() {
        let mut model = small_model();
        let frozen_before: Vec<_> = model.params().into_iter().filter(|(_, t)| !t).map(|(m, _)| m.clone()).collect();
        let theta0 = model.theta0().to_vec();
        let cfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        train(&mut model, &blobs(Split::Pretrain, 30, 1.0), &blobs(Split::PretrainTest, 30, 1.0), &cfg, RunOptions::default()).unwrap();
        let frozen_after: Vec<_> = model.params().into_iter().filter(|(_, t)| !t).map(|(m, _)| m.clone()).collect();
        assert_eq!(frozen_before, frozen_after);
        assert_eq!(model.theta0(), &theta0[..]);
        assert!(model.delta_theta().unwrap().iter().any(|d| d.max_abs() > 0.0));
    }

    #[test]
    fn divergence_reports_position() {
        let mut model = small_model();
        let cfg = TrainConfig {
            epochs: 20,
            learning_rate: 1e4,
            momentum: 0.0,
            mode: TrainMode::Plain,
            ..TrainConfig::default()
        };
        let err = train(&mut model, &blobs(Split::Pretrain, 32, 1.0), &blobs(Split::PretrainTest, 32, 1.0), &cfg, RunOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err}");
        assert!(err.is_numerical());
    }

    #[test]
    fn invalid_configs() {
        let mut model = small_model();
        let d = blobs(Split::Pretrain, 8, 1.0);
        for cfg in [
            TrainConfig { p: 1.0, ..TrainConfig::default() },
            TrainConfig { instances: 0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { learning_rate: 0.0, ..TrainConfig::default() },
        ] {
            assert!(matches!(train(&mut model, &d, &d, &cfg, RunOptions::default()), Err(Error::Config(_))));
        }
    }
}
