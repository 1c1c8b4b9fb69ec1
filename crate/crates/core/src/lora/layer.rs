use rand::Rng;

use crate::error::{Error, Result};
use crate::lora::mask::DropoutMask;
use crate::rng::LabRng;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Matrix, NodeId};

/// Frozen base weight `W0` (`n1 x n2`) plus a trainable delta `B·A`.
///
/// Activations are `batch x features`, so the layer computes
/// `x·W0ᵀ + scale·(x·Âᵀ)·B̂ᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraLayer<T> {
    pub w0: Matrix<T>,
    /// `r x n2`
    pub a: Matrix<T>,
    /// `n1 x r`
    pub b: Matrix<T>,
    pub scale: T,
}

/// Quasi-SVD adapter: `ΔW = P·diag(Λ)·Q`. Dropout never touches `Λ`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaLoraLayer<T> {
    pub w0: Matrix<T>,
    /// `n1 x r`
    pub p: Matrix<T>,
    /// `1 x r` diagonal of `Λ`
    pub lambda: Matrix<T>,
    /// `r x n2`
    pub q: Matrix<T>,
    pub scale: T,
}

fn check_rank(n1: usize, n2: usize, rank: usize) -> Result<()> {
    if rank == 0 || rank > n1.min(n2) {
        return Err(Error::Config(format!(
            "rank {rank} must lie in 1..={} for a {n1}x{n2} weight",
            n1.min(n2)
        )));
    }
    Ok(())
}

fn uniform_init<T: Scalar>(rows: usize, cols: usize, bound: f64, rng: &mut LabRng) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |_, _| T::of(rng.random_range(-bound..bound)))
}

fn check_mask(mask: &DropoutMask, n1: usize, n2: usize) -> Result<()> {
    if mask.n1() != n1 || mask.n2() != n2 {
        return Err(Error::dim("dropout mask", (n1, n2), (mask.n1(), mask.n2())));
    }
    Ok(())
}

impl<T: Scalar> LoraLayer<T> {
    /// `A ~ U(-1/√n2, 1/√n2)`, `B = 0`, so the delta starts at zero.
    pub fn init(w0: Matrix<T>, rank: usize, scale: T, rng: &mut LabRng) -> Result<Self> {
        let (n1, n2) = w0.shape();
        check_rank(n1, n2, rank)?;
        let bound = 1.0 / (n2 as f64).sqrt();
        Ok(LoraLayer {
            a: uniform_init(rank, n2, bound, rng),
            b: Matrix::zeros(n1, rank),
            w0,
            scale,
        })
    }

    pub fn from_parts(w0: Matrix<T>, a: Matrix<T>, b: Matrix<T>, scale: T) -> Result<Self> {
        let (n1, n2) = w0.shape();
        let rank = a.rows();
        check_rank(n1, n2, rank)?;
        if a.cols() != n2 {
            return Err(Error::dim("lora A", (rank, n2), a.shape()));
        }
        if b.shape() != (n1, rank) {
            return Err(Error::dim("lora B", (n1, rank), b.shape()));
        }
        Ok(LoraLayer { w0, a, b, scale })
    }

    pub fn n1(&self) -> usize {
        self.w0.rows()
    }

    pub fn n2(&self) -> usize {
        self.w0.cols()
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    /// `(Â, B̂)`: columns of `A` and rows of `B` zeroed where the mask drops.
    pub fn apply_dropout(&self, mask: &DropoutMask) -> Result<(Matrix<T>, Matrix<T>)> {
        check_mask(mask, self.n1(), self.n2())?;
        let a_hat = self.a.hadamard(&mask.input_matrix(self.rank()))?;
        let b_hat = self.b.hadamard(&mask.output_matrix(self.rank()))?;
        Ok((a_hat, b_hat))
    }

    /// `scale·B̂Â`, or `scale·BA` without a mask.
    pub fn merged_delta(&self, mask: Option<&DropoutMask>) -> Result<Matrix<T>> {
        let (a, b) = match mask {
            Some(m) => self.apply_dropout(m)?,
            None => (self.a.clone(), self.b.clone()),
        };
        Ok(b.matmul(&a)?.scale(self.scale))
    }

    pub fn forward(&self, x: &Matrix<T>, mask: Option<&DropoutMask>) -> Result<Matrix<T>> {
        if x.cols() != self.n2() {
            return Err(Error::dim("lora forward", x.shape(), self.w0.shape()));
        }
        let (a, b) = match mask {
            Some(m) => self.apply_dropout(m)?,
            None => (self.a.clone(), self.b.clone()),
        };
        let base = x.matmul(&self.w0.transpose())?;
        let delta = x.matmul(&a.transpose())?.matmul(&b.transpose())?;
        base.add(&delta.scale(self.scale))
    }
}

impl<T: Scalar> AdaLoraLayer<T> {
    /// `P, Q ~ U(-1/√n2, 1/√n2)`, `Λ = 0`.
    pub fn init(w0: Matrix<T>, rank: usize, scale: T, rng: &mut LabRng) -> Result<Self> {
        let (n1, n2) = w0.shape();
        check_rank(n1, n2, rank)?;
        let bound = 1.0 / (n2 as f64).sqrt();
        Ok(AdaLoraLayer {
            p: uniform_init(n1, rank, bound, rng),
            lambda: Matrix::zeros(1, rank),
            q: uniform_init(rank, n2, bound, rng),
            w0,
            scale,
        })
    }

    pub fn from_parts(
        w0: Matrix<T>,
        p: Matrix<T>,
        lambda: Matrix<T>,
        q: Matrix<T>,
        scale: T,
    ) -> Result<Self> {
        let (n1, n2) = w0.shape();
        let rank = lambda.cols();
        check_rank(n1, n2, rank)?;
        if lambda.rows() != 1 {
            return Err(Error::dim("adalora Lambda", (1, rank), lambda.shape()));
        }
        if p.shape() != (n1, rank) {
            return Err(Error::dim("adalora P", (n1, rank), p.shape()));
        }
        if q.shape() != (rank, n2) {
            return Err(Error::dim("adalora Q", (rank, n2), q.shape()));
        }
        Ok(AdaLoraLayer {
            w0,
            p,
            lambda,
            q,
            scale,
        })
    }

    pub fn n1(&self) -> usize {
        self.w0.rows()
    }

    pub fn n2(&self) -> usize {
        self.w0.cols()
    }

    pub fn rank(&self) -> usize {
        self.lambda.cols()
    }

    /// `(P̂, Q̂)`: rows of `P` and columns of `Q` zeroed; `Λ` is left alone.
    pub fn apply_dropout(&self, mask: &DropoutMask) -> Result<(Matrix<T>, Matrix<T>)> {
        check_mask(mask, self.n1(), self.n2())?;
        let p_hat = self.p.hadamard(&mask.output_matrix(self.rank()))?;
        let q_hat = self.q.hadamard(&mask.input_matrix(self.rank()))?;
        Ok((p_hat, q_hat))
    }

    fn lambda_diag(&self) -> Matrix<T> {
        let r = self.rank();
        Matrix::from_fn(r, r, |i, j| if i == j { self.lambda[(0, i)] } else { T::zero() })
    }

    pub fn merged_delta(&self, mask: Option<&DropoutMask>) -> Result<Matrix<T>> {
        let (p, q) = match mask {
            Some(m) => self.apply_dropout(m)?,
            None => (self.p.clone(), self.q.clone()),
        };
        Ok(p.matmul(&self.lambda_diag())?.matmul(&q)?.scale(self.scale))
    }

    pub fn forward(&self, x: &Matrix<T>, mask: Option<&DropoutMask>) -> Result<Matrix<T>> {
        if x.cols() != self.n2() {
            return Err(Error::dim("adalora forward", x.shape(), self.w0.shape()));
        }
        let (p, q) = match mask {
            Some(m) => self.apply_dropout(m)?,
            None => (self.p.clone(), self.q.clone()),
        };
        let base = x.matmul(&self.w0.transpose())?;
        let delta = x
            .matmul(&q.transpose())?
            .matmul(&self.lambda_diag())?
            .matmul(&p.transpose())?;
        base.add(&delta.scale(self.scale))
    }
}

/// Graph leaves for one low-rank adapter.
#[derive(Clone, Copy, Debug)]
pub enum AdapterNodes {
    Lora {
        w0: NodeId,
        a: NodeId,
        b: NodeId,
    },
    AdaLora {
        w0: NodeId,
        p: NodeId,
        lambda: NodeId,
        q: NodeId,
    },
}

/// Masked low-rank delta applied to `x` on the graph, without the base term.
pub fn graph_delta<T: Scalar>(
    g: &mut Graph<T>,
    nodes: AdapterNodes,
    x: NodeId,
    mask: Option<&DropoutMask>,
    scale: T,
) -> Result<NodeId> {
    let out = match nodes {
        AdapterNodes::Lora { a, b, .. } => {
            let (a, b) = match mask {
                Some(m) => {
                    let (n1, rank) = g.value(b).shape();
                    check_mask(m, n1, g.value(a).cols())?;
                    let mi = g.constant(m.input_matrix(rank));
                    let mo = g.constant(m.output_matrix(rank));
                    (g.hadamard(a, mi)?, g.hadamard(b, mo)?)
                }
                None => (a, b),
            };
            let at = g.transpose(a);
            let bt = g.transpose(b);
            let h = g.matmul(x, at)?;
            g.matmul(h, bt)?
        }
        AdapterNodes::AdaLora { p, lambda, q, .. } => {
            let (p, q) = match mask {
                Some(m) => {
                    let (n1, rank) = g.value(p).shape();
                    check_mask(m, n1, g.value(q).cols())?;
                    let mo = g.constant(m.output_matrix(rank));
                    let mi = g.constant(m.input_matrix(rank));
                    (g.hadamard(p, mo)?, g.hadamard(q, mi)?)
                }
                None => (p, q),
            };
            let qt = g.transpose(q);
            let pt = g.transpose(p);
            let d = g.diag(lambda)?;
            let h = g.matmul(x, qt)?;
            let h = g.matmul(h, d)?;
            g.matmul(h, pt)?
        }
    };
    Ok(if scale == T::one() { out } else { g.scale(out, scale) })
}

/// Masked merged delta `scale·B̂Â` (resp. `scale·P̂ΛQ̂`) as a graph node.
pub fn graph_merged_delta<T: Scalar>(
    g: &mut Graph<T>,
    nodes: AdapterNodes,
    mask: Option<&DropoutMask>,
    scale: T,
) -> Result<NodeId> {
    let out = match nodes {
        AdapterNodes::Lora { a, b, .. } => {
            let (a, b) = match mask {
                Some(m) => {
                    let rank = g.value(a).rows();
                    check_mask(m, g.value(b).rows(), g.value(a).cols())?;
                    let mi = g.constant(m.input_matrix(rank));
                    let mo = g.constant(m.output_matrix(rank));
                    (g.hadamard(a, mi)?, g.hadamard(b, mo)?)
                }
                None => (a, b),
            };
            g.matmul(b, a)?
        }
        AdapterNodes::AdaLora { p, lambda, q, .. } => {
            let (p, q) = match mask {
                Some(m) => {
                    let rank = g.value(q).rows();
                    check_mask(m, g.value(p).rows(), g.value(q).cols())?;
                    let mo = g.constant(m.output_matrix(rank));
                    let mi = g.constant(m.input_matrix(rank));
                    (g.hadamard(p, mo)?, g.hadamard(q, mi)?)
                }
                None => (p, q),
            };
            let d = g.diag(lambda)?;
            let pd = g.matmul(p, d)?;
            g.matmul(pd, q)?
        }
    };
    Ok(if scale == T::one() { out } else { g.scale(out, scale) })
}
