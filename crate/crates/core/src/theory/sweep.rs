//! Generalization gap against dropout rate, next to the bound term.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::{ExperimentConfig, ProbeProblem, StabilityConfig};
use crate::harness::data::{generate_dataset, DataKind, GeneratorSpec, Split};
use crate::harness::pipeline::{finetune, pretrain, Datasets};
use crate::harness::report::SweepRow;
use crate::rng::{self, derive_seed, tag};
use crate::theory::bound::{generalization_bound, BoundConstants};
use crate::theory::stability::{stability_probe, LoraSoftmax, Quadratic1d, StabilityReport, ETA_NOTE};
use crate::training::{Model, RunOptions, RunRecord, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub p: f64,
    pub bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapSweepRecord {
    /// Sorted by `(p, seed)`.
    pub rows: Vec<SweepRow>,
    pub bound: Vec<BoundRow>,
    pub constants: BoundConstants,
    /// Where `C` came from: `"config"` or `"probe loss range"`.
    pub c_source: String,
    pub eta_note: String,
    pub diverged: usize,
}

impl GapSweepRecord {
    /// Mean of `f` over the non-diverged rows at rate `p`.
    pub fn mean_at(&self, p: f64, f: impl Fn(&SweepRow) -> f64) -> Option<f64> {
        let vals: Vec<f64> = self.rows.iter().filter(|r| r.p == p && !r.diverged).map(f).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Builds the probe problem described by `config` from `seed`.
pub fn probe_report(config: &StabilityConfig, lambda: f64, seed: u64) -> Result<StabilityReport> {
    let s = derive_seed(&[seed, tag("stability")]);
    match config.problem {
        ProbeProblem::Quadratic => {
            let mut r = rng::rng_from(&[s]);
            let xs = (0..config.n).map(|_| StandardNormal.sample(&mut r)).collect();
            stability_probe(&Quadratic1d { xs }, lambda, config.p)
        }
        ProbeProblem::LoraSoftmax => {
            let data = generate_dataset::<f64>(&GeneratorSpec {
                kind: DataKind::Blobs,
                classes: config.classes,
                dim: config.dim,
                n: config.n,
                noise: config.noise,
                center_scale: 2.0,
                shift_angle: 0.0,
                shift_translation: 0.0,
                split: Split::Pretrain,
                seed: s,
            })?;
            let problem = LoraSoftmax::random(&data, config.rank, s)?;
            stability_probe(&problem, lambda, config.p)
        }
    }
}

fn summarize(p: f64, seed: u64, record: &RunRecord) -> SweepRow {
    match record.last() {
        Some(r) => SweepRow {
            p,
            seed,
            train_loss: r.train_loss,
            test_loss: r.test_loss,
            gap: r.test_loss - r.train_loss,
            train_acc: r.train_acc,
            test_acc: r.test_acc,
            ece: r.ece,
            diverged: false,
        },
        None => diverged_row(p, seed),
    }
}

fn diverged_row(p: f64, seed: u64) -> SweepRow {
    SweepRow {
        p,
        seed,
        train_loss: f64::NAN,
        test_loss: f64::NAN,
        gap: f64::NAN,
        train_acc: f64::NAN,
        test_acc: f64::NAN,
        ece: f64::NAN,
        diverged: true,
    }
}

/// One sweep cell's outcome with its run record and model when it finished.
#[derive(Clone, Debug)]
pub struct SweepCell {
    pub row: SweepRow,
    pub record: Option<RunRecord>,
    pub model: Option<Model<f64>>,
}

/// Fine-tunes every `(p, seed)` cell of the grid from a per-seed pretrained
/// base. Cells run in parallel and are returned sorted by `(p, seed)`.
/// Diverged cells are kept with `diverged = true` and NaN metrics.
pub fn run_cells(config: &ExperimentConfig, options: RunOptions) -> Result<Vec<SweepCell>> {
    config.validate()?;
    let sweep = &config.sweep;
    let mut seeds_sorted = sweep.seeds.clone();
    seeds_sorted.sort_unstable();
    seeds_sorted.dedup();
    let bases = seeds_sorted
        .par_iter()
        .map(|&s| {
            let data = Datasets::generate(config, s)?;
            let (model, _) = pretrain(config, s, &data, options)?;
            Ok((data, model))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grid: Vec<f64> = sweep.p_grid.clone();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let cells: Vec<(f64, usize)> = grid
        .iter()
        .flat_map(|&p| (0..seeds_sorted.len()).map(move |k| (p, k)))
        .collect();
    cells
        .par_iter()
        .map(|&(p, k)| {
            let seed = seeds_sorted[k];
            let (data, base) = &bases[k];
            let tc = TrainConfig {
                p,
                ..config.finetune.clone()
            };
            match finetune(config, seed, data, base, Some(&tc), options) {
                Ok((model, record)) => Ok(SweepCell {
                    row: summarize(p, seed, &record),
                    record: Some(record),
                    model: Some(model),
                }),
                Err(Error::Divergence { .. }) => Ok(SweepCell {
                    row: diverged_row(p, seed),
                    record: None,
                    model: None,
                }),
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// Tabulates the bound over the grid with constants from a stability probe
/// at `λ = bound_lambda`; `n` is the fine-tune training size.
pub fn bound_table(config: &ExperimentConfig, seed: u64) -> Result<(Vec<BoundRow>, BoundConstants, String)> {
    let sweep = &config.sweep;
    let probe = probe_report(&config.stability, sweep.bound_lambda, seed)?;
    let (c, c_source) = match sweep.c {
        Some(c) => (c, "config".to_string()),
        None => (probe.loss_range, "probe loss range".to_string()),
    };
    let constants = BoundConstants {
        c,
        eta: probe.eta,
        lambda_min: probe.lambda_min,
        lambda: sweep.bound_lambda,
        n: config.data.finetune_train_n,
        delta: sweep.delta,
    };
    constants.validate()?;
    let mut grid = sweep.p_grid.clone();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let rows = grid
        .into_iter()
        .map(|p| BoundRow {
            p,
            bound: generalization_bound(&constants, p),
        })
        .collect();
    Ok((rows, constants, c_source))
}

pub fn gap_sweep(config: &ExperimentConfig, options: RunOptions) -> Result<GapSweepRecord> {
    let cells = run_cells(config, options)?;
    let (bound, constants, c_source) = bound_table(config, config.seed)?;
    let rows: Vec<SweepRow> = cells.into_iter().map(|c| c.row).collect();
    Ok(GapSweepRecord {
        diverged: rows.iter().filter(|r| r.diverged).count(),
        rows,
        bound,
        constants,
        c_source,
        eta_note: ETA_NOTE.into(),
    })
}
