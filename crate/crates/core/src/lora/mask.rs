use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, LabRng};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Which loop of the train/test procedure a mask stream belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Train,
    Eval,
}

impl Phase {
    fn word(self) -> u64 {
        match self {
            Phase::Train => rng::tag("train-masks"),
            Phase::Eval => rng::tag("eval-masks"),
        }
    }
}

/// Position of one mask draw in the training or evaluation loop.
///
/// The mask for a layer is a pure function of this key plus the
/// instance and layer index, so instances can be drawn in any order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskKey {
    pub seed: u64,
    pub phase: Phase,
    pub epoch: u64,
    pub iteration: u64,
}

impl MaskKey {
    pub fn train(seed: u64, epoch: usize, iteration: usize) -> Self {
        MaskKey {
            seed,
            phase: Phase::Train,
            epoch: epoch as u64,
            iteration: iteration as u64,
        }
    }

    pub fn eval(seed: u64, pass: u64, batch: usize) -> Self {
        MaskKey {
            seed,
            phase: Phase::Eval,
            epoch: pass,
            iteration: batch as u64,
        }
    }

    pub fn rng(&self, instance: usize, layer: usize) -> LabRng {
        rng::rng_from(&[
            self.seed,
            self.phase.word(),
            self.epoch,
            self.iteration,
            instance as u64,
            layer as u64,
        ])
    }
}

pub fn check_rate(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout rate {p} outside [0, 1)")));
    }
    Ok(())
}

/// Bernoulli keep-masks over the input and output dimensions of one adapter.
///
/// `input` has length `n2` (columns of `A`, resp. `Q`) and `output` has
/// length `n1` (rows of `B`, resp. `P`). `true` keeps the dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask {
    pub layer: usize,
    pub p: f64,
    pub input: Vec<bool>,
    pub output: Vec<bool>,
}

impl DropoutMask {
    pub fn ones(layer: usize, n1: usize, n2: usize) -> Self {
        DropoutMask {
            layer,
            p: 0.0,
            input: vec![true; n2],
            output: vec![true; n1],
        }
    }

    pub fn zeros(layer: usize, n1: usize, n2: usize) -> Self {
        DropoutMask {
            layer,
            p: 0.0,
            input: vec![false; n2],
            output: vec![false; n1],
        }
    }

    /// Each entry is kept independently with probability `1 - p`.
    pub fn sample(layer: usize, n1: usize, n2: usize, p: f64, rng: &mut LabRng) -> Result<Self> {
        check_rate(p)?;
        // Draw output first, then input, so the layout is fixed per key.
        let output = (0..n1).map(|_| keep(p, rng)).collect();
        let input = (0..n2).map(|_| keep(p, rng)).collect();
        Ok(DropoutMask {
            layer,
            p,
            input,
            output,
        })
    }

    pub fn n1(&self) -> usize {
        self.output.len()
    }

    pub fn n2(&self) -> usize {
        self.input.len()
    }

    /// `rank x n2` matrix whose column `j` is `input[j]`.
    pub fn input_matrix<T: Scalar>(&self, rank: usize) -> Matrix<T> {
        Matrix::from_fn(rank, self.n2(), |_, j| indicator(self.input[j]))
    }

    /// `n1 x rank` matrix whose row `i` is `output[i]`.
    pub fn output_matrix<T: Scalar>(&self, rank: usize) -> Matrix<T> {
        Matrix::from_fn(self.n1(), rank, |i, _| indicator(self.output[i]))
    }

    pub fn kept(&self) -> usize {
        self.input.iter().chain(&self.output).filter(|&&k| k).count()
    }
}

fn keep(p: f64, rng: &mut LabRng) -> bool {
    rng.random::<f64>() >= p
}

fn indicator<T: Scalar>(keep: bool) -> T {
    if keep {
        T::one()
    } else {
        T::zero()
    }
}

/// One dropout instance: a mask for every adapted layer of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    pub instance: usize,
    pub key: Option<MaskKey>,
    masks: Vec<DropoutMask>,
}

impl MaskSet {
    /// `shapes` lists `(layer index, n1, n2)` for every adapted layer.
    pub fn sample(shapes: &[(usize, usize, usize)], p: f64, key: MaskKey, instance: usize) -> Result<Self> {
        check_rate(p)?;
        let masks = shapes
            .iter()
            .map(|&(layer, n1, n2)| DropoutMask::sample(layer, n1, n2, p, &mut key.rng(instance, layer)))
            .collect::<Result<_>>()?;
        Ok(MaskSet {
            instance,
            key: Some(key),
            masks,
        })
    }

    pub fn from_masks(instance: usize, masks: Vec<DropoutMask>) -> Self {
        MaskSet {
            instance,
            key: None,
            masks,
        }
    }

    pub fn all_ones(shapes: &[(usize, usize, usize)]) -> Self {
        let masks = shapes
            .iter()
            .map(|&(layer, n1, n2)| DropoutMask::ones(layer, n1, n2))
            .collect();
        Self::from_masks(0, masks)
    }

    pub fn for_layer(&self, layer: usize) -> Option<&DropoutMask> {
        self.masks.iter().find(|m| m.layer == layer)
    }

    pub fn masks(&self) -> &[DropoutMask] {
        &self.masks
    }
}

/// Draws `n` instances for one loop position.
pub fn sample_instances(
    shapes: &[(usize, usize, usize)],
    p: f64,
    key: MaskKey,
    n: usize,
) -> Result<Vec<MaskSet>> {
    (0..n).map(|r| MaskSet::sample(shapes, p, key, r)).collect()
}

/// Probability that an entry of the masked product `B̂Â` is exactly zero.
pub fn entry_zero_probability(p: f64) -> f64 {
    2.0 * p - p * p
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rate_keeps_everything() {
        let key = MaskKey::train(3, 0, 0);
        let m = DropoutMask::sample(0, 5, 7, 0.0, &mut key.rng(0, 0)).unwrap();
        assert!(m.input.iter().chain(&m.output).all(|&k| k));
    }

    #[test]
    fn rate_outside_unit_interval_is_config_error() {
        let key = MaskKey::train(3, 0, 0);
        for p in [-0.1, 1.0, 1.5, f64::NAN] {
            assert!(matches!(
                DropoutMask::sample(0, 2, 2, p, &mut key.rng(0, 0)),
                Err(Error::Config(_))
            ));
        }
    }

    #[test]
    fn same_key_same_mask() {
        let shapes = [(0, 8, 6), (2, 4, 8)];
        let key = MaskKey::train(11, 4, 9);
        let a = MaskSet::sample(&shapes, 0.5, key, 3).unwrap();
        let b = MaskSet::sample(&shapes, 0.5, key, 3).unwrap();
        assert_eq!(a, b);
        let c = MaskSet::sample(&shapes, 0.5, key, 2).unwrap();
        assert_ne!(a.masks(), c.masks());
    }

    #[test]
    fn instance_order_does_not_matter() {
        let shapes = [(0, 8, 6)];
        let key = MaskKey::eval(1, 0, 5);
        let forward = sample_instances(&shapes, 0.3, key, 4).unwrap();
        let backward: Vec<_> = (0..4)
            .rev()
            .map(|r| MaskSet::sample(&shapes, 0.3, key, r).unwrap())
            .collect();
        for (r, set) in backward.iter().rev().enumerate() {
            assert_eq!(set, &forward[r]);
        }
    }

    #[test]
    fn entry_zero_probability_values() {
        assert_eq!(entry_zero_probability(0.5), 0.75);
        assert_eq!(entry_zero_probability(0.0), 0.0);
    }

    #[test]
    fn mask_matrices_broadcast_along_rank() {
        let m = DropoutMask {
            layer: 0,
            p: 0.5,
            input: vec![true, false, true],
            output: vec![false, true],
        };
        let mi: Matrix<f64> = m.input_matrix(2);
        assert_eq!(mi.to_rows(), vec![vec![1.0, 0.0, 1.0], vec![1.0, 0.0, 1.0]]);
        let mo: Matrix<f64> = m.output_matrix(3);
        assert_eq!(mo.to_rows(), vec![vec![0.0; 3], vec![1.0; 3]]);
    }
}
