//! Versioned JSON experiment configuration. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ensemble::{Domain, EnsembleSettings};
use crate::error::{Error, Result};
use crate::harness::data::{DataKind, GeneratorSpec, Split};
use crate::lora::check_rate;
use crate::training::{AdapterKind, HeadMode, ModelSpec, TrainConfig, TrainMode};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub adapter: AdapterKind,
    pub rank: usize,
    /// Multiplier on the adapter delta.
    pub scale: f64,
    #[serde(default)]
    pub head: HeadMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataKind,
    pub classes: usize,
    pub dim: usize,
    pub noise: f64,
    pub center_scale: f64,
    pub shift_angle: f64,
    pub shift_translation: f64,
    pub pretrain_n: usize,
    pub pretrain_test_n: usize,
    pub finetune_train_n: usize,
    pub finetune_test_n: usize,
}

impl DataConfig {
    pub fn spec(&self, split: Split, seed: u64) -> GeneratorSpec {
        let n = match split {
            Split::Pretrain => self.pretrain_n,
            Split::PretrainTest => self.pretrain_test_n,
            Split::FinetuneTrain => self.finetune_train_n,
            Split::FinetuneTest => self.finetune_test_n,
        };
        GeneratorSpec {
            kind: self.kind,
            classes: self.classes,
            dim: self.dim,
            n,
            noise: self.noise,
            center_scale: self.center_scale,
            shift_angle: self.shift_angle,
            shift_translation: self.shift_translation,
            split,
            seed,
        }
    }
}

/// Generalization-gap sweep over dropout rates and seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub p_grid: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Failure probability of the tabulated bound.
    pub delta: f64,
    /// Loss-range constant of the bound; the probe's observed range when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    /// `λ` used by the bound column and the probe that supplies `η`, `Λ_min`.
    pub bound_lambda: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            p_grid: vec![0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 0.95],
            seeds: (0..5).collect(),
            delta: 0.1,
            c: None,
            bound_lambda: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JensenConfig {
    pub p: f64,
    pub instances: usize,
    pub trials: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub domain: Domain,
}

impl Default for JensenConfig {
    fn default() -> Self {
        JensenConfig {
            p: 0.5,
            instances: 4,
            trials: 1000,
            batch_size: 32,
            domain: Domain::Logits,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeProblem {
    /// `½(θ − x)²` on standard normal scalars.
    Quadratic,
    /// Softmax regression with a frozen `A` and trainable `B`.
    #[default]
    LoraSoftmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilityConfig {
    pub problem: ProbeProblem,
    pub n: usize,
    pub lambdas: Vec<f64>,
    pub p: f64,
    pub rank: usize,
    pub dim: usize,
    pub classes: usize,
    pub noise: f64,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        StabilityConfig {
            problem: ProbeProblem::LoraSoftmax,
            n: 50,
            lambdas: vec![0.1, 1.0, 10.0],
            p: 0.5,
            rank: 4,
            dim: 8,
            classes: 3,
            noise: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McNormConfig {
    pub p: f64,
    pub draws: usize,
    /// Length of the random `Δθ` when `delta` is absent.
    pub dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<Vec<f64>>,
}

impl Default for McNormConfig {
    fn default() -> Self {
        McNormConfig {
            p: 0.5,
            draws: 100_000,
            dim: 64,
            delta: None,
        }
    }
}

/// Everything one CLI invocation needs. All randomness descends from
/// `seed`; the `seed` fields inside the train configs are overwritten with
/// derived values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub format_version: u32,
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    /// Evaluation used by `eval`; the fine-tune ensemble when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EnsembleSettings>,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub jensen: JensenConfig,
    #[serde(default)]
    pub stability: StabilityConfig,
    #[serde(default)]
    pub mcnorm: McNormConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    /// 2-layer MLP (hidden 32) on 4 shifted blobs, rank 8, `p = 0.5`, `N = 4`.
    fn default() -> Self {
        ExperimentConfig {
            format_version: CONFIG_VERSION,
            seed: 0,
            model: ModelConfig {
                hidden: vec![32],
                adapter: AdapterKind::Lora,
                rank: 8,
                scale: 1.0,
                head: HeadMode::Adapter,
            },
            data: DataConfig {
                kind: DataKind::Blobs,
                classes: 4,
                dim: 16,
                noise: 1.0,
                center_scale: 2.5,
                shift_angle: 0.6,
                shift_translation: 1.0,
                pretrain_n: 2048,
                pretrain_test_n: 512,
                finetune_train_n: 64,
                finetune_test_n: 1024,
            },
            pretrain: TrainConfig {
                epochs: 30,
                batch_size: 32,
                p: 0.0,
                instances: 1,
                learning_rate: 0.05,
                mode: TrainMode::Plain,
                momentum: 0.9,
                ..TrainConfig::default()
            },
            finetune: TrainConfig {
                epochs: 150,
                batch_size: 16,
                p: 0.5,
                instances: 4,
                learning_rate: 0.05,
                momentum: 0.9,
                ..TrainConfig::default()
            },
            eval: None,
            sweep: SweepConfig::default(),
            jensen: JensenConfig::default(),
            stability: StabilityConfig::default(),
            mcnorm: McNormConfig::default(),
            out: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            input_dim: self.data.dim,
            hidden: self.model.hidden.clone(),
            classes: self.data.classes,
        }
    }

    pub fn eval_settings(&self) -> EnsembleSettings {
        self.eval.clone().unwrap_or_else(|| self.finetune.ensemble())
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config format_version {} (supported: {CONFIG_VERSION})",
                self.format_version
            )));
        }
        if self.model.rank == 0 || self.model.hidden.contains(&0) {
            return Err(Error::Config("rank and hidden widths must be positive".into()));
        }
        if !(self.model.scale.is_finite()) {
            return Err(Error::Config("adapter scale must be finite".into()));
        }
        self.pretrain.validate()?;
        self.finetune.validate()?;
        if let Some(e) = &self.eval {
            check_rate(e.p)?;
            if e.instances == 0 || e.bins == 0 {
                return Err(Error::Config("eval needs at least one instance and one bin".into()));
            }
        }
        let s = &self.sweep;
        if s.p_grid.is_empty() || s.p_grid.iter().any(|p| !(0.0..=0.95).contains(p)) {
            return Err(Error::Config("sweep p_grid must be non-empty and within [0, 0.95]".into()));
        }
        if s.seeds.len() < 3 {
            return Err(Error::Config(format!("sweep needs at least 3 seeds, got {}", s.seeds.len())));
        }
        if !(s.delta > 0.0 && s.delta < 1.0) || s.c.is_some_and(|c| !(c > 0.0)) || !(s.bound_lambda > 0.0) {
            return Err(Error::Config("sweep needs delta in (0, 1), c > 0 and bound_lambda > 0".into()));
        }
        check_rate(self.jensen.p)?;
        if self.jensen.instances == 0 || self.jensen.batch_size == 0 {
            return Err(Error::Config("jensen needs positive instances and batch size".into()));
        }
        check_rate(self.stability.p)?;
        if self.stability.n < 2 || self.stability.lambdas.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::Config("stability probe needs n >= 2 and non-negative lambdas".into()));
        }
        check_rate(self.mcnorm.p)?;
        if self.mcnorm.draws == 0 {
            return Err(Error::Config("mcnorm needs at least one draw".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let text = c.to_json().unwrap();
        let back = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn unknown_key_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&ExperimentConfig::default().to_json().unwrap()).unwrap();
        v["sweep"]["p_gird"] = serde_json::json!([0.1]);
        assert!(matches!(ExperimentConfig::from_json(&v.to_string()), Err(Error::Config(_))));
    }

    #[test]
    fn default_experiment_values() {
        let c = ExperimentConfig::default();
        assert_eq!((c.finetune.p, c.finetune.instances), (0.5, 4));
        assert_eq!((c.model.rank, c.model.hidden.clone()), (8, vec![32]));
        assert_eq!((c.data.classes, c.data.pretrain_n, c.data.finetune_train_n, c.data.finetune_test_n), (4, 2048, 64, 1024));
    }

    #[test]
    fn too_few_sweep_seeds() {
        let mut c = ExperimentConfig::default();
        c.sweep.seeds = vec![1, 2];
        assert!(c.validate().is_err());
    }
}
