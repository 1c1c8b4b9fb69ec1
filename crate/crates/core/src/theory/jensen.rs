//! The ensemble/Jensen inequality: the loss of the averaged ensemble never
//! exceeds the average instance loss when the loss is convex in the output.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::ensemble::{ensemble_predict, Domain};
use crate::error::{Error, Result};
use crate::harness::data::Dataset;
use crate::lora::MaskKey;
use crate::rng;
use crate::scalar::Scalar;
use crate::training::Model;

/// Gaps below `-VIOLATION_SLACK` count as violations.
pub const VIOLATION_SLACK: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JensenSettings {
    pub p: f64,
    pub instances: usize,
    pub trials: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub domain: Domain,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JensenRow {
    pub trial: usize,
    /// Loss of the aggregated ensemble output.
    pub lhs: f64,
    /// Mean of the per-instance losses.
    pub rhs: f64,
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JensenReport {
    pub p: f64,
    pub instances: usize,
    pub domain: Domain,
    pub rows: Vec<JensenRow>,
    pub violations: usize,
    /// Most negative gap seen, or 0 if none was negative.
    pub max_negative_gap: f64,
}

impl JensenReport {
    pub fn from_rows(p: f64, instances: usize, domain: Domain, rows: Vec<JensenRow>) -> Self {
        let violations = rows.iter().filter(|r| r.gap < -VIOLATION_SLACK).count();
        let max_negative_gap = rows.iter().map(|r| r.gap).fold(0.0, f64::min);
        JensenReport {
            p,
            instances,
            domain,
            rows,
            violations,
            max_negative_gap,
        }
    }

    /// Concatenates reports with matching settings, renumbering trials.
    pub fn merge(reports: &[JensenReport]) -> Result<Self> {
        let Some(first) = reports.first() else {
            return Err(Error::Config("nothing to merge".into()));
        };
        let mut rows = Vec::new();
        for r in reports {
            if r.p != first.p || r.instances != first.instances || r.domain != first.domain {
                return Err(Error::Config("cannot merge Jensen reports with different settings".into()));
            }
            for row in &r.rows {
                let trial = rows.len();
                rows.push(JensenRow { trial, ..*row });
            }
        }
        Ok(Self::from_rows(first.p, first.instances, first.domain, rows))
    }
}

/// Runs `trials` random minibatches through an `N`-instance ensemble and
/// records `rhs − lhs` for each.
pub fn jensen_check<T: Scalar>(
    model: &Model<T>,
    data: &Dataset<T>,
    settings: &JensenSettings,
    seed: u64,
) -> Result<JensenReport> {
    if data.is_empty() || settings.batch_size == 0 {
        return Err(Error::Config("Jensen check needs a non-empty dataset and batch".into()));
    }
    let batch = settings.batch_size.min(data.len());
    let mask_seed = rng::derive_seed(&[seed, rng::tag("jensen-masks")]);
    let mut rows = Vec::with_capacity(settings.trials);
    for trial in 0..settings.trials {
        let mut pick = rng::rng_from(&[seed, rng::tag("jensen-batch"), trial as u64]);
        let indices = index::sample(&mut pick, data.len(), batch).into_vec();
        let subset = data.select(&indices);
        let key = MaskKey::eval(mask_seed, 0, trial);
        let out = ensemble_predict(model, &subset.features, settings.p, settings.instances, key, settings.domain)?;
        let lhs = out.loss(&subset.labels).as_f64();
        let rhs = out.mean_instance_loss(&subset.labels).as_f64();
        rows.push(JensenRow {
            trial,
            lhs,
            rhs,
            gap: rhs - lhs,
        });
    }
    Ok(JensenReport::from_rows(settings.p, settings.instances, settings.domain, rows))
}
