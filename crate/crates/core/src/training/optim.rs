use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// `θ ← θ − lr·g` for every parameter.
pub fn sgd_step<T: Scalar>(params: &mut [&mut Matrix<T>], grads: &[Matrix<T>], lr: T) -> Result<()> {
    check(params, grads)?;
    for (p, g) in params.iter_mut().zip(grads) {
        for (v, &d) in p.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *v -= lr * d;
        }
    }
    Ok(())
}

fn check<T: Scalar>(params: &[&mut Matrix<T>], grads: &[Matrix<T>]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Contract(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Contract(format!(
                "gradient shape {:?} does not match parameter shape {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

/// Stateful optimizer over the trainable parameters of one model.
#[derive(Clone, Debug)]
pub enum Optimizer<T> {
    Sgd {
        lr: T,
        momentum: T,
        velocity: Vec<Matrix<T>>,
    },
    Adam {
        lr: T,
        beta1: T,
        beta2: T,
        eps: T,
        step: i32,
        m: Vec<Matrix<T>>,
        v: Vec<Matrix<T>>,
    },
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64, momentum: f64) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd {
                lr: T::of(lr),
                momentum: T::of(momentum),
                velocity: Vec::new(),
            },
            OptimizerKind::Adam => Optimizer::Adam {
                lr: T::of(lr),
                beta1: T::of(0.9),
                beta2: T::of(0.999),
                eps: T::of(1e-8),
                step: 0,
                m: Vec::new(),
                v: Vec::new(),
            },
        }
    }

    pub fn step(&mut self, params: &mut [&mut Matrix<T>], grads: &[Matrix<T>]) -> Result<()> {
        check(params, grads)?;
        let zeros = || grads.iter().map(|g| Matrix::zeros(g.rows(), g.cols())).collect::<Vec<_>>();
        match self {
            Optimizer::Sgd { lr, momentum, velocity } => {
                if *momentum == T::zero() {
                    return sgd_step(params, grads, *lr);
                }
                if velocity.is_empty() {
                    *velocity = zeros();
                }
                for ((p, g), vel) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
                    for ((w, &d), u) in p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(vel.as_mut_slice()) {
                        *u = *momentum * *u + d;
                        *w -= *lr * *u;
                    }
                }
            }
            Optimizer::Adam { lr, beta1, beta2, eps, step, m, v } => {
                if m.is_empty() {
                    *m = zeros();
                    *v = zeros();
                }
                *step += 1;
                let c1 = T::one() - beta1.powi(*step);
                let c2 = T::one() - beta2.powi(*step);
                for (((p, g), mi), vi) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
                    let slots = p
                        .as_mut_slice()
                        .iter_mut()
                        .zip(g.as_slice())
                        .zip(mi.as_mut_slice())
                        .zip(vi.as_mut_slice());
                    for (((w, &d), a), b) in slots {
                        *a = *beta1 * *a + (T::one() - *beta1) * d;
                        *b = *beta2 * *b + (T::one() - *beta2) * d * d;
                        let mhat = *a / c1;
                        let vhat = *b / c2;
                        *w -= *lr * mhat / (vhat.sqrt() + *eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_step() {
        let mut theta = Matrix::filled(1, 1, 1.0f64);
        sgd_step(&mut [&mut theta], &[Matrix::filled(1, 1, 2.0)], 0.1).unwrap();
        assert!((theta[(0, 0)] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_noop() {
        let mut theta = Matrix::from_rows(&[vec![0.3f64, -2.0]]).unwrap();
        let before = theta.clone();
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut opt = Optimizer::new(kind, 0.1, 0.9);
            opt.step(&mut [&mut theta], &[Matrix::zeros(1, 2)]).unwrap();
            assert_eq!(theta, before);
        }
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let mut theta = Matrix::<f64>::zeros(2, 2);
        let err = sgd_step(&mut [&mut theta], &[Matrix::zeros(2, 3)], 0.1).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut theta = Matrix::filled(1, 1, 0.0f64);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.01, 0.0);
        opt.step(&mut [&mut theta], &[Matrix::filled(1, 1, 3.0)]).unwrap();
        assert!((theta[(0, 0)] + 0.01).abs() < 1e-9);
    }
}
