//! Define-by-run reverse-mode autodiff over [`Matrix`] values.
//!
//! A [`Graph`] is an append-only tape: every node's parents have smaller
//! indices, so the tape order is a topological order and the backward pass
//! is a single reverse sweep. Gradients are accumulated in that fixed order,
//! which makes repeated runs bit-identical.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    Relu(NodeId),
    Transpose(NodeId),
    /// Adds a `1 x cols` row to every row of the first operand.
    AddRow(NodeId, NodeId),
    /// Lifts a `1 x r` row into an `r x r` diagonal matrix.
    Diag(NodeId),
    Scale(NodeId, T),
    SumSquares(NodeId),
    /// Sum of `1 x 1` nodes.
    SumScalars(Vec<NodeId>),
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Matrix<T>,
    },
}

impl<T> Op<T> {
    pub fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Hadamard(..) => "hadamard",
            Op::Relu(_) => "relu",
            Op::Transpose(_) => "transpose",
            Op::AddRow(..) => "add_row",
            Op::Diag(_) => "diag",
            Op::Scale(..) => "scale",
            Op::SumSquares(_) => "sum_squares",
            Op::SumScalars(_) => "sum_scalars",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        }
    }

    pub fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Hadamard(a, b)
            | Op::AddRow(a, b) => vec![*a, *b],
            Op::Relu(a) | Op::Transpose(a) | Op::Diag(a) | Op::Scale(a, _) | Op::SumSquares(a) => {
                vec![*a]
            }
            Op::SumScalars(xs) => xs.clone(),
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node<T> {
    value: Matrix<T>,
    grad: Option<Matrix<T>>,
    op: Op<T>,
    requires_grad: bool,
}

impl<T: Scalar> Node<T> {
    pub fn value(&self) -> &Matrix<T> {
        &self.value
    }

    pub fn op(&self) -> &Op<T> {
        &self.op
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
}

#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node<T> {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Matrix<T> {
        &self.nodes[id.0].value
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, id: NodeId) -> T {
        self.nodes[id.0].value.as_slice()[0]
    }

    /// Accumulated gradient; zeros when nothing flowed into the node.
    pub fn grad(&self, id: NodeId) -> Matrix<T> {
        let node = &self.nodes[id.0];
        node.grad
            .clone()
            .unwrap_or_else(|| Matrix::zeros(node.value.rows(), node.value.cols()))
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> NodeId {
        let requires_grad = op
            .parents()
            .iter()
            .any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Matrix<T>) -> NodeId {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Matrix<T>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(value, Op::Hadamard(a, b)))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|v| v.max(T::zero()));
        self.push(value, Op::Relu(a))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(Error::dim("add_row", av.shape(), rv.shape()));
        }
        let value = Matrix::from_fn(av.rows(), av.cols(), |i, j| av[(i, j)] + rv[(0, j)]);
        Ok(self.push(value, Op::AddRow(a, row)))
    }

    pub fn diag(&mut self, row: NodeId) -> Result<NodeId> {
        let rv = self.value(row);
        if rv.rows() != 1 {
            return Err(Error::dim("diag", rv.shape(), (1, rv.cols())));
        }
        let n = rv.cols();
        let value = Matrix::from_fn(n, n, |i, j| if i == j { rv[(0, i)] } else { T::zero() });
        Ok(self.push(value, Op::Diag(row)))
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> NodeId {
        let value = self.value(a).scale(s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn sum_squares(&mut self, a: NodeId) -> NodeId {
        let value = Matrix::filled(1, 1, self.value(a).sum_squares());
        self.push(value, Op::SumSquares(a))
    }

    pub fn sum_scalars(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let mut total = T::zero();
        for &x in xs {
            let v = self.value(x);
            if v.shape() != (1, 1) {
                return Err(Error::dim("sum_scalars", v.shape(), (1, 1)));
            }
            total += v.as_slice()[0];
        }
        Ok(self.push(Matrix::filled(1, 1, total), Op::SumScalars(xs.to_vec())))
    }

    /// Arithmetic mean of `1 x 1` nodes; each contributes `1/len` of its adjoint.
    pub fn mean_scalars(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::Config("mean over zero terms".into()));
        }
        let total = self.sum_scalars(xs)?;
        Ok(self.scale(total, T::one() / T::of(xs.len() as f64)))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.rows() != labels.len() {
            return Err(Error::dim("softmax_cross_entropy", lv.shape(), (labels.len(), lv.cols())));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= lv.cols()) {
            return Err(Error::Index(format!(
                "label {y} at row {i} out of range for {} classes",
                lv.cols()
            )));
        }
        let (value, probs) = cross_entropy_forward(lv, labels);
        Ok(self.push(
            Matrix::filled(1, 1, value),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Fills every gradient reachable from `loss` by one reverse sweep.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {shape:?}"
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(Matrix::ones(1, 1));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            let contributions = self.adjoints(idx, &g)?;
            self.nodes[idx].grad = Some(g);
            for (parent, contribution) in contributions {
                self.accumulate(parent, contribution)?;
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, g: Matrix<T>) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return Ok(());
        }
        match &mut node.grad {
            Some(existing) => existing.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn adjoints(&self, idx: usize, g: &Matrix<T>) -> Result<Vec<(NodeId, Matrix<T>)>> {
        let wants = |id: &NodeId| self.nodes[id.0].requires_grad;
        let mut out = Vec::new();
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(a) {
                    out.push((*a, g.matmul(&self.value(*b).transpose())?));
                }
                if wants(b) {
                    out.push((*b, self.value(*a).transpose().matmul(g)?));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.scale(-T::one())));
            }
            Op::Hadamard(a, b) => {
                if wants(a) {
                    out.push((*a, g.hadamard(self.value(*b))?));
                }
                if wants(b) {
                    out.push((*b, g.hadamard(self.value(*a))?));
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                out.push((
                    *a,
                    g.zip_map(x, "relu_backward", |gv, xv| {
                        if xv > T::zero() {
                            gv
                        } else {
                            T::zero()
                        }
                    })?,
                ));
            }
            Op::Transpose(a) => out.push((*a, g.transpose())),
            Op::AddRow(a, row) => {
                out.push((*a, g.clone()));
                if wants(row) {
                    let mut sums = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            sums[(0, j)] += g[(i, j)];
                        }
                    }
                    out.push((*row, sums));
                }
            }
            Op::Diag(row) => {
                let n = g.rows();
                out.push((*row, Matrix::from_fn(1, n, |_, j| g[(j, j)])));
            }
            Op::Scale(a, s) => out.push((*a, g.scale(*s))),
            Op::SumSquares(a) => {
                let factor = g.as_slice()[0] * T::of(2.0);
                out.push((*a, self.value(*a).scale(factor)));
            }
            Op::SumScalars(xs) => {
                for x in xs {
                    out.push((*x, g.clone()));
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let upstream = g.as_slice()[0];
                let batch = T::of(labels.len() as f64);
                let mut d = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    d[(i, y)] -= T::one();
                }
                out.push((*logits, d.scale(upstream / batch)));
            }
        }
        Ok(out)
    }
}

/// Mean cross-entropy and the row softmax it was computed from.
pub(crate) fn cross_entropy_forward<T: Scalar>(logits: &Matrix<T>, labels: &[usize]) -> (T, Matrix<T>) {
    let probs = logits.softmax_rows();
    let mut total = T::zero();
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        total += lse - row[y];
    }
    (total / T::of(labels.len().max(1) as f64), probs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn hadamard_with_ones_is_identity() {
        let mut g = Graph::new();
        let a = g.constant(m(&[&[1.0, -2.0], &[3.0, 4.0]]));
        let ones = g.constant(Matrix::ones(2, 2));
        let h = g.hadamard(a, ones).unwrap();
        assert_eq!(g.value(h), g.value(a));
    }

    #[test]
    fn relu_definition() {
        let mut g = Graph::new();
        let a = g.constant(m(&[&[-1.0, 2.0]]));
        let r = g.relu(a);
        assert_eq!(g.value(r), &m(&[&[0.0, 2.0]]));
    }

    #[test]
    fn add_backward_passes_gradient_to_both() {
        let mut g = Graph::new();
        let a = g.param(m(&[&[1.0, 2.0]]));
        let b = g.param(m(&[&[3.0, 5.0]]));
        let s = g.add(a, b).unwrap();
        let w = g.constant(m(&[&[2.0], &[-1.0]]));
        let out = g.matmul(s, w).unwrap();
        g.backward(out).unwrap();
        assert_eq!(g.grad(a), m(&[&[2.0, -1.0]]));
        assert_eq!(g.grad(b), m(&[&[2.0, -1.0]]));
    }

    #[test]
    fn fan_out_accumulates_both_adjoints() {
        // y = a·w1 + a·w2, so `a` feeds two consumers.
        let mut g = Graph::new();
        let a = g.param(m(&[&[1.5]]));
        let w1 = g.constant(m(&[&[2.0]]));
        let w2 = g.constant(m(&[&[-7.0]]));
        let y1 = g.matmul(a, w1).unwrap();
        let y2 = g.matmul(a, w2).unwrap();
        let y = g.add(y1, y2).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(a), m(&[&[-5.0]]));
    }

    #[test]
    fn frozen_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let w0 = g.constant(m(&[&[1.0, 2.0]]));
        let a = g.param(m(&[&[3.0, 4.0]]));
        let s = g.hadamard(w0, a).unwrap();
        let l = g.sum_squares(s);
        g.backward(l).unwrap();
        assert_eq!(g.grad(w0), Matrix::zeros(1, 2));
        assert_eq!(g.grad(a), m(&[&[6.0, 32.0]]));
    }

    #[test]
    fn non_scalar_backward_is_contract_error() {
        let mut g = Graph::new();
        let a = g.param(Matrix::<f64>::ones(2, 2));
        assert!(matches!(g.backward(a), Err(Error::Contract(_))));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g = Graph::new();
        let logits = g.constant(Matrix::<f64>::zeros(3, 4));
        let l = g.softmax_cross_entropy(logits, &[0, 1, 3]).unwrap();
        assert!((g.scalar(l) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_saturated() {
        let mut g = Graph::new();
        let logits = g.constant(m(&[&[10.0, -10.0]]));
        let l = g.softmax_cross_entropy(logits, &[0]).unwrap();
        assert!(g.scalar(l).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut g = Graph::new();
        let logits = g.constant(Matrix::<f64>::zeros(1, 2));
        assert!(matches!(
            g.softmax_cross_entropy(logits, &[2]),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn cross_entropy_backward_is_softmax_minus_onehot() {
        let mut g = Graph::new();
        let logits = g.param(m(&[&[1.0, 2.0, 0.5], &[0.0, -1.0, 3.0]]));
        let l = g.softmax_cross_entropy(logits, &[2, 0]).unwrap();
        g.backward(l).unwrap();
        let p = g.value(logits).softmax_rows();
        let grad = g.grad(logits);
        for (i, y) in [2usize, 0].into_iter().enumerate() {
            for j in 0..3 {
                let onehot = if j == y { 1.0 } else { 0.0 };
                assert!((grad[(i, j)] - (p[(i, j)] - onehot) / 2.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn shape_mismatch_in_elementwise() {
        let mut g = Graph::new();
        let a = g.constant(Matrix::<f64>::zeros(2, 2));
        let b = g.constant(Matrix::<f64>::zeros(2, 3));
        assert!(matches!(g.add(a, b), Err(Error::Dimension { .. })));
        assert!(matches!(g.hadamard(a, b), Err(Error::Dimension { .. })));
    }
}
