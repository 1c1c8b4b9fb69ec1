//! Pointwise hypothesis stability on small convex learners.
//!
//! The probe fits the regularized objective
//! `L_S(θ) + λ(2p−p²)·‖θ − θ⁰‖²` on the full sample and on every
//! leave-one-out sample, measures how much each left-out point's loss moves,
//! and compares the largest move with `2η² / ((Λ_min + 2λ(2p−p²))·n)`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::data::Dataset;
use crate::lora::{check_rate, entry_zero_probability};
use crate::rng;
use crate::tensor::{Graph, Matrix};
use crate::theory::bound::phs_bound;
use crate::theory::linalg::{asymmetry, cholesky_solve, fd_hessian, jacobi_eigen, symmetrize};

pub const GRADIENT_TOLERANCE: f64 = 1e-8;
pub const HESSIAN_STEP: f64 = 1e-4;
pub const SYMMETRY_TOLERANCE: f64 = 1e-6;
const MAX_NEWTON_STEPS: usize = 200;

pub const ETA_NOTE: &str = "eta is a local surrogate: the largest per-sample gradient norm of the \
regularized loss over the full-data and leave-one-out optima, not a global Lipschitz constant";

/// A learner whose mean data loss is convex in its parameter vector.
pub trait ConvexProblem: Sync {
    fn len(&self) -> usize;
    fn dim(&self) -> usize;
    /// Reference point of the regularizer.
    fn theta0(&self) -> Vec<f64>;
    /// Mean data loss over `indices` and its gradient at `theta`.
    fn loss_grad(&self, indices: &[usize], theta: &[f64]) -> Result<(f64, Vec<f64>)>;
}

/// `ℓ(x; θ) = ½(θ − x)²` on scalar data.
#[derive(Clone, Debug)]
pub struct Quadratic1d {
    pub xs: Vec<f64>,
}

impl ConvexProblem for Quadratic1d {
    fn len(&self) -> usize {
        self.xs.len()
    }

    fn dim(&self) -> usize {
        1
    }

    fn theta0(&self) -> Vec<f64> {
        vec![0.0]
    }

    fn loss_grad(&self, indices: &[usize], theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let m = indices.len().max(1) as f64;
        let (mut loss, mut grad) = (0.0, 0.0);
        for &i in indices {
            let r = theta[0] - self.xs[i];
            loss += 0.5 * r * r;
            grad += r;
        }
        Ok((loss / m, vec![grad / m]))
    }
}

/// Softmax regression `logits = x·W0ᵀ + b0 + scale·(x·Aᵀ)·Bᵀ` with frozen
/// `W0`, `b0` and `A`; only `B` (`K × r`, flattened row-major) is trained.
///
/// With `A` frozen the logits are linear in `B`, so cross-entropy stays
/// convex while the update keeps the low-rank form `ΔW = scale·BA`.
#[derive(Clone, Debug)]
pub struct LoraSoftmax {
    base: Matrix<f64>,
    projected: Matrix<f64>,
    labels: Vec<usize>,
    classes: usize,
    rank: usize,
    scale: f64,
}

impl LoraSoftmax {
    pub fn new(
        features: &Matrix<f64>,
        labels: &[usize],
        classes: usize,
        w0: &Matrix<f64>,
        bias0: &Matrix<f64>,
        a: &Matrix<f64>,
        scale: f64,
    ) -> Result<Self> {
        let d = features.cols();
        if w0.shape() != (classes, d) || bias0.shape() != (1, classes) || a.cols() != d {
            return Err(Error::dim("LoraSoftmax::new", w0.shape(), a.shape()));
        }
        if labels.len() != features.rows() || labels.iter().any(|&y| y >= classes) {
            return Err(Error::Config("labels do not match features or class count".into()));
        }
        let mut base = features.matmul(&w0.transpose())?;
        for i in 0..base.rows() {
            for k in 0..classes {
                base[(i, k)] += bias0[(0, k)];
            }
        }
        Ok(LoraSoftmax {
            base,
            projected: features.matmul(&a.transpose())?,
            labels: labels.to_vec(),
            classes,
            rank: a.rows(),
            scale,
        })
    }

    /// Random frozen `W0` and `A` drawn like fresh adapter weights,
    /// `U(±1/√d)`, zero bias, unit scale.
    pub fn random(data: &Dataset<f64>, rank: usize, seed: u64) -> Result<Self> {
        let d = data.features.cols();
        let k = data.classes();
        if rank == 0 || rank * k > 64 {
            return Err(Error::Config(format!(
                "probe rank {rank} with {k} classes outside 1..=64 trainable parameters"
            )));
        }
        let bound = 1.0 / (d as f64).sqrt();
        let mut r = rng::rng_from(&[seed, rng::tag("probe-weights")]);
        let w0 = Matrix::from_fn(k, d, |_, _| r.random_range(-bound..bound));
        let a = Matrix::from_fn(rank, d, |_, _| r.random_range(-bound..bound));
        Self::new(&data.features, &data.labels, k, &w0, &Matrix::zeros(1, k), &a, 1.0)
    }
}

impl ConvexProblem for LoraSoftmax {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn dim(&self) -> usize {
        self.classes * self.rank
    }

    fn theta0(&self) -> Vec<f64> {
        vec![0.0; self.dim()]
    }

    fn loss_grad(&self, indices: &[usize], theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::new();
        let b = g.param(Matrix::from_vec(self.classes, self.rank, theta.to_vec())?);
        let z = g.constant(self.projected.select_rows(indices));
        let base = g.constant(self.base.select_rows(indices));
        let bt = g.transpose(b);
        let zb = g.matmul(z, bt)?;
        let delta = g.scale(zb, self.scale);
        let logits = g.add(base, delta)?;
        let labels: Vec<usize> = indices.iter().map(|&i| self.labels[i]).collect();
        let loss = g.softmax_cross_entropy(logits, &labels)?;
        g.backward(loss)?;
        Ok((g.scalar(loss), g.grad(b).into_vec()))
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Regularized objective and gradient over `indices`.
fn objective(
    problem: &dyn ConvexProblem,
    indices: &[usize],
    theta: &[f64],
    theta0: &[f64],
    reg: f64,
) -> Result<(f64, Vec<f64>)> {
    let (mut f, mut g) = problem.loss_grad(indices, theta)?;
    for k in 0..theta.len() {
        let d = theta[k] - theta0[k];
        f += reg * d * d;
        g[k] += 2.0 * reg * d;
    }
    Ok((f, g))
}

/// Hessian of the unregularized mean loss over `indices`.
fn data_hessian(problem: &dyn ConvexProblem, indices: &[usize], theta: &[f64]) -> Result<Matrix<f64>> {
    let h = fd_hessian(|t| problem.loss_grad(indices, t).map(|(_, g)| g), theta, HESSIAN_STEP)?;
    let asym = asymmetry(&h);
    if !(asym <= SYMMETRY_TOLERANCE) {
        return Err(Error::Numerical(format!(
            "finite-difference Hessian asymmetric by {asym:e} (tolerance {SYMMETRY_TOLERANCE:e})"
        )));
    }
    Ok(symmetrize(&h))
}

/// Damped Newton iteration to `‖∇F‖ < GRADIENT_TOLERANCE`.
///
/// With `hessian` given, that matrix is reused as a fixed preconditioner,
/// otherwise the Hessian is re-estimated every step.
fn fit(
    problem: &dyn ConvexProblem,
    indices: &[usize],
    start: &[f64],
    reg: f64,
    hessian: Option<&Matrix<f64>>,
) -> Result<(Vec<f64>, usize)> {
    let theta0 = problem.theta0();
    let mut theta = start.to_vec();
    let (mut f, mut g) = objective(problem, indices, &theta, &theta0, reg)?;
    for step in 0..MAX_NEWTON_STEPS {
        let gnorm = norm(&g);
        if !gnorm.is_finite() {
            return Err(Error::Probe("objective gradient is not finite".into()));
        }
        if gnorm < GRADIENT_TOLERANCE {
            return Ok((polish(problem, indices, theta, g, reg, hessian)?, step));
        }
        let mut h = match hessian {
            Some(h) => h.clone(),
            None => data_hessian(problem, indices, &theta)?,
        };
        for k in 0..h.rows() {
            h[(k, k)] += 2.0 * reg;
        }
        let rhs: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut damping = 0.0;
        let dir = loop {
            let mut damped = h.clone();
            for k in 0..damped.rows() {
                damped[(k, k)] += damping;
            }
            if let Some(d) = cholesky_solve(&damped, &rhs) {
                break d;
            }
            damping = if damping == 0.0 { 1e-10 } else { damping * 10.0 };
            if damping > 1e6 {
                return Err(Error::Probe("Newton system not positive definite".into()));
            }
        };
        let slope: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
        let mut t = 1.0;
        loop {
            let trial: Vec<f64> = theta.iter().zip(&dir).map(|(x, d)| x + t * d).collect();
            let (ft, gt) = objective(problem, indices, &trial, &theta0, reg)?;
            // Near the optimum F stalls at rounding level; a smaller gradient
            // is then the useful signal.
            if ft <= f + 1e-4 * t * slope || norm(&gt) < gnorm {
                theta = trial;
                f = ft;
                g = gt;
                break;
            }
            t *= 0.5;
            if t < 1e-12 {
                return Err(Error::Probe(format!(
                    "line search failed at gradient norm {gnorm:e}"
                )));
            }
        }
    }
    Err(Error::Probe(format!(
        "no convergence to gradient norm {GRADIENT_TOLERANCE:e} in {MAX_NEWTON_STEPS} Newton steps (at {:e})",
        norm(&g)
    )))
}

/// Extra Newton steps past the tolerance, kept only while the gradient
/// norm keeps shrinking, so optima are accurate to rounding level.
fn polish(
    problem: &dyn ConvexProblem,
    indices: &[usize],
    mut theta: Vec<f64>,
    mut g: Vec<f64>,
    reg: f64,
    hessian: Option<&Matrix<f64>>,
) -> Result<Vec<f64>> {
    let theta0 = problem.theta0();
    for _ in 0..4 {
        let mut h = match hessian {
            Some(h) => h.clone(),
            None => data_hessian(problem, indices, &theta)?,
        };
        for k in 0..h.rows() {
            h[(k, k)] += 2.0 * reg;
        }
        let rhs: Vec<f64> = g.iter().map(|v| -v).collect();
        let Some(dir) = cholesky_solve(&h, &rhs) else {
            break;
        };
        let trial: Vec<f64> = theta.iter().zip(&dir).map(|(x, d)| x + d).collect();
        let (_, gt) = objective(problem, indices, &trial, &theta0, reg)?;
        if !(norm(&gt) < norm(&g)) {
            break;
        }
        theta = trial;
        g = gt;
    }
    Ok(theta)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRow {
    pub i: usize,
    /// `|L_λ(x_i; θ(Sⁱ)) − L_λ(x_i; θ(S))|`
    pub perturbation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub n: usize,
    pub lambda: f64,
    pub p: f64,
    /// `λ(2p−p²)`, the coefficient actually applied to `‖θ − θ⁰‖²`.
    pub effective_lambda: f64,
    pub eta: f64,
    pub eta_note: String,
    pub lambda_min: f64,
    /// Smallest eigenvalue before clamping at 0.
    pub lambda_min_raw: f64,
    pub hessian_asymmetry: f64,
    pub beta_bound: f64,
    pub rows: Vec<PerturbationRow>,
    pub max_observed: f64,
    pub bound_satisfied: bool,
    /// Range of the per-sample regularized loss at `θ(S)`.
    pub loss_range: f64,
    pub theta: Vec<f64>,
    pub newton_steps: usize,
}

/// Per-sample regularized loss `L_λ(x_i; θ)`.
fn sample_loss(problem: &dyn ConvexProblem, i: usize, theta: &[f64], theta0: &[f64], reg: f64) -> Result<(f64, Vec<f64>)> {
    objective(problem, &[i], theta, theta0, reg)
}

/// Fits `θ(S)` and all `n` leave-one-out optima (in parallel, warm-started
/// from `θ(S)`) and assembles the report in index order.
pub fn stability_probe(problem: &dyn ConvexProblem, lambda: f64, p: f64) -> Result<StabilityReport> {
    check_rate(p)?;
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda {lambda} must be non-negative")));
    }
    let n = problem.len();
    if n < 2 {
        return Err(Error::Config("stability probe needs at least 2 samples".into()));
    }
    let reg = lambda * entry_zero_probability(p);
    let theta0 = problem.theta0();
    let all: Vec<usize> = (0..n).collect();
    let (theta, newton_steps) = fit(problem, &all, &theta0, reg, None)?;

    let raw = fd_hessian(|t| problem.loss_grad(&all, t).map(|(_, g)| g), &theta, HESSIAN_STEP)?;
    let hessian_asymmetry = asymmetry(&raw);
    if !(hessian_asymmetry <= SYMMETRY_TOLERANCE) {
        return Err(Error::Numerical(format!(
            "finite-difference Hessian asymmetric by {hessian_asymmetry:e} (tolerance {SYMMETRY_TOLERANCE:e})"
        )));
    }
    let hessian = symmetrize(&raw);
    let (eigenvalues, _) = jacobi_eigen(&hessian)?;
    let lambda_min_raw = eigenvalues[0];
    let lambda_min = lambda_min_raw.max(0.0);

    let loo: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let rest: Vec<usize> = (0..n).filter(|&k| k != i).collect();
            match fit(problem, &rest, &theta, reg, Some(&hessian)) {
                Ok((t, _)) => Ok(t),
                // Fall back to fresh Hessians if the full-data one is a poor preconditioner.
                Err(Error::Probe(_)) => fit(problem, &rest, &theta, reg, None).map(|(t, _)| t),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;

    let mut eta: f64 = 0.0;
    let mut at_full = Vec::with_capacity(n);
    for i in 0..n {
        let (l, g) = sample_loss(problem, i, &theta, &theta0, reg)?;
        eta = eta.max(norm(&g));
        at_full.push(l);
    }
    let per_optimum: Vec<(f64, f64)> = loo
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let mut worst: f64 = 0.0;
            let mut own = 0.0;
            for j in 0..n {
                let (l, g) = sample_loss(problem, j, t, &theta0, reg)?;
                worst = worst.max(norm(&g));
                if j == i {
                    own = l;
                }
            }
            Ok((own, worst))
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(n);
    for (i, &(own, worst)) in per_optimum.iter().enumerate() {
        eta = eta.max(worst);
        rows.push(PerturbationRow {
            i,
            perturbation: (own - at_full[i]).abs(),
        });
    }

    let max_observed = rows.iter().map(|r| r.perturbation).fold(0.0, f64::max);
    let beta_bound = phs_bound(eta, lambda_min, lambda, p, n);
    let lo = at_full.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = at_full.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max_observed.is_finite() || beta_bound.is_nan() {
        return Err(Error::Numerical("stability probe produced non-finite values".into()));
    }
    Ok(StabilityReport {
        n,
        lambda,
        p,
        effective_lambda: reg,
        eta,
        eta_note: ETA_NOTE.into(),
        lambda_min,
        lambda_min_raw,
        hessian_asymmetry,
        beta_bound,
        rows,
        max_observed,
        bound_satisfied: max_observed <= beta_bound,
        loss_range: hi - lo,
        theta,
        newton_steps,
    })
}
