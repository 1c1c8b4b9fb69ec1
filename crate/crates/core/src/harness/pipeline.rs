//! Generate → pretrain → fine-tune → evaluate, with every random stream
//! derived from one experiment seed.

use rand::Rng;

use crate::ensemble::evaluate;
use crate::error::Result;
use crate::harness::config::ExperimentConfig;
use crate::harness::data::{generate_dataset, Dataset, Split};
use crate::harness::report::EvalReport;
use crate::rng::{self, derive_seed, tag};
use crate::training::{train, HeadMode, Model, RunOptions, RunRecord, TrainConfig};

/// Named sub-seeds of an experiment seed.
pub mod seeds {
    use super::*;

    pub fn data(seed: u64) -> u64 {
        derive_seed(&[seed, tag("data")])
    }

    pub fn pretrain(seed: u64) -> u64 {
        derive_seed(&[seed, tag("pretrain")])
    }

    pub fn finetune(seed: u64) -> u64 {
        derive_seed(&[seed, tag("finetune")])
    }

    pub fn eval(seed: u64) -> u64 {
        derive_seed(&[seed, tag("eval")])
    }

    pub fn init(seed: u64, what: &str) -> u64 {
        derive_seed(&[seed, tag("init"), tag(what)])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Datasets {
    pub pretrain: Dataset<f64>,
    pub pretrain_test: Dataset<f64>,
    pub finetune_train: Dataset<f64>,
    pub finetune_test: Dataset<f64>,
}

impl Datasets {
    pub fn generate(config: &ExperimentConfig, seed: u64) -> Result<Self> {
        let s = seeds::data(seed);
        let split = |split| generate_dataset(&config.data.spec(split, s));
        Ok(Datasets {
            pretrain: split(Split::Pretrain)?,
            pretrain_test: split(Split::PretrainTest)?,
            finetune_train: split(Split::FinetuneTrain)?,
            finetune_test: split(Split::FinetuneTest)?,
        })
    }
}

fn seeded(config: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..config.clone()
    }
}

/// Trains the dense base model on the pretrain split.
pub fn pretrain(
    config: &ExperimentConfig,
    seed: u64,
    data: &Datasets,
    options: RunOptions,
) -> Result<(Model<f64>, RunRecord)> {
    let mut init = rng::rng_from(&[seeds::init(seed, "dense")]);
    let mut model = Model::dense(&config.model_spec(), &mut init)?;
    let record = train(
        &mut model,
        &data.pretrain,
        &data.pretrain_test,
        &seeded(&config.pretrain, seeds::pretrain(seed)),
        options,
    )?;
    Ok((model, record))
}

/// Freezes `pretrained`, attaches fresh adapters and trains them on the
/// fine-tune split. `train_config` overrides `config.finetune` (sweeps
/// vary `p` this way).
pub fn finetune(
    config: &ExperimentConfig,
    seed: u64,
    data: &Datasets,
    pretrained: &Model<f64>,
    train_config: Option<&TrainConfig>,
    options: RunOptions,
) -> Result<(Model<f64>, RunRecord)> {
    let mut init = rng::rng_from(&[seeds::init(seed, "adapters")]);
    let m = &config.model;
    let mut model = Model::with_adapters(pretrained, m.adapter, m.rank, m.scale, m.head, &mut init)?;
    let tc = seeded(train_config.unwrap_or(&config.finetune), seeds::finetune(seed));
    let record = train(&mut model, &data.finetune_train, &data.finetune_test, &tc, options)?;
    Ok((model, record))
}

/// Evaluates on the fine-tune test split with [`ExperimentConfig::eval_settings`].
pub fn evaluate_model(config: &ExperimentConfig, seed: u64, data: &Datasets, model: &Model<f64>) -> Result<EvalReport> {
    let settings = config.eval_settings();
    let eval = evaluate(model, &data.finetune_test, &settings, seeds::eval(seed))?;
    Ok(EvalReport::new(&eval, settings.instances, settings.p, settings.domain))
}

/// Adapter model with every trainable parameter redrawn from `U(±1/√n_in)`,
/// so that masked instances genuinely differ.
pub fn random_adapter_model(config: &ExperimentConfig, seed: u64) -> Result<Model<f64>> {
    let mut r = rng::rng_from(&[seeds::init(seed, "random-adapter")]);
    let dense = Model::dense(&config.model_spec(), &mut r)?;
    let m = &config.model;
    let head = if m.head == HeadMode::Trainable { HeadMode::Frozen } else { m.head };
    let mut model = Model::with_adapters(&dense, m.adapter, m.rank, m.scale, head, &mut r)?;
    for param in model.trainable_mut() {
        let bound = 1.0 / (param.cols() as f64).sqrt();
        for v in param.as_mut_slice() {
            *v = r.random_range(-bound..bound);
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::TrainMode;

    fn small() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.data.pretrain_n = 64;
        c.data.pretrain_test_n = 32;
        c.data.finetune_train_n = 16;
        c.data.finetune_test_n = 32;
        c.pretrain.epochs = 2;
        c.finetune.epochs = 0;
        c
    }

    #[test]
    fn fresh_adapters_reproduce_pretrained_outputs() {
        let c = small();
        let data = Datasets::generate(&c, 3).unwrap();
        let (base, _) = pretrain(&c, 3, &data, RunOptions::default()).unwrap();
        let (tuned, record) = finetune(&c, 3, &data, &base, None, RunOptions::default()).unwrap();
        assert!(record.rows.is_empty());
        let x = &data.finetune_test.features;
        assert_eq!(tuned.logits(x, None).unwrap(), base.logits(x, None).unwrap());
    }

    #[test]
    fn degenerate_dropout_equals_plain_lora() {
        let mut c = small();
        c.finetune.epochs = 3;
        c.finetune.p = 0.0;
        c.finetune.instances = 1;
        let data = Datasets::generate(&c, 4).unwrap();
        let (base, _) = pretrain(&c, 4, &data, RunOptions::default()).unwrap();
        let (a, ra) = finetune(&c, 4, &data, &base, None, RunOptions::default()).unwrap();
        let plain = TrainConfig {
            mode: TrainMode::Plain,
            ..c.finetune.clone()
        };
        let (b, rb) = finetune(&c, 4, &data, &base, Some(&plain), RunOptions::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.rows, rb.rows);
    }
}
