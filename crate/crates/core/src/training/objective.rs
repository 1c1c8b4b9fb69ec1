use crate::error::{Error, Result};
use crate::lora::{entry_zero_probability, MaskSet};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Matrix, NodeId};
use crate::training::model::{BoundParams, Model};

/// A minibatch of features and class labels.
#[derive(Clone, Copy, Debug)]
pub struct Batch<'a, T> {
    pub x: &'a Matrix<T>,
    pub labels: &'a [usize],
}

/// Cross-entropy of the unmasked model.
pub fn task_loss<T: Scalar>(
    model: &Model<T>,
    g: &mut Graph<T>,
    bound: &BoundParams,
    batch: Batch<'_, T>,
) -> Result<NodeId> {
    let x = g.constant(batch.x.clone());
    let logits = model.forward_graph(g, bound, x, None)?;
    g.softmax_cross_entropy(logits, batch.labels)
}

/// Mean of the batch cross-entropy over `N` masked copies of the adapters.
///
/// All instances read the same parameter leaves, so backward leaves each
/// instance's adjoint scaled by `1/N` in the shared gradients, summed in
/// instance order.
pub fn multi_instance_loss<T: Scalar>(
    model: &Model<T>,
    g: &mut Graph<T>,
    bound: &BoundParams,
    batch: Batch<'_, T>,
    masks: &[MaskSet],
) -> Result<NodeId> {
    if masks.is_empty() {
        return Err(Error::Config("instance count N must be at least 1".into()));
    }
    let x = g.constant(batch.x.clone());
    let mut losses = Vec::with_capacity(masks.len());
    for m in masks {
        let logits = model.forward_graph(g, bound, x, Some(m))?;
        losses.push(g.softmax_cross_entropy(logits, batch.labels)?);
    }
    g.mean_scalars(&losses)
}

/// `λ(2p−p²)·Σ‖ΔW‖²` over the merged deltas of every adapted layer.
pub fn sparsity_penalty<T: Scalar>(
    model: &Model<T>,
    g: &mut Graph<T>,
    bound: &BoundParams,
    lambda: f64,
    p: f64,
) -> Result<NodeId> {
    let deltas = model.merged_deltas_graph(g, bound)?;
    let squares: Vec<NodeId> = deltas.into_iter().map(|d| g.sum_squares(d)).collect();
    let total = if squares.is_empty() {
        g.constant(Matrix::zeros(1, 1))
    } else {
        g.sum_scalars(&squares)?
    };
    Ok(g.scale(total, T::of(lambda * entry_zero_probability(p))))
}

/// Task loss plus the closed-form expected masked-norm penalty.
pub fn explicit_regularized_loss<T: Scalar>(
    model: &Model<T>,
    g: &mut Graph<T>,
    bound: &BoundParams,
    batch: Batch<'_, T>,
    lambda: f64,
    p: f64,
) -> Result<NodeId> {
    if lambda < 0.0 {
        return Err(Error::Config(format!("lambda {lambda} must be non-negative")));
    }
    let task = task_loss(model, g, bound, batch)?;
    let penalty = sparsity_penalty(model, g, bound, lambda, p)?;
    g.add(task, penalty)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::{DropoutMask, MaskKey};
    use crate::rng::rng_from;
    use crate::training::model::{AdapterKind, HeadMode, ModelSpec};
    use crate::training::Layer;

    fn fixture() -> (Model<f64>, Matrix<f64>, Vec<usize>) {
        let spec = ModelSpec {
            input_dim: 4,
            hidden: vec![5],
            classes: 3,
        };
        let mut rng = rng_from(&[10]);
        let base = Model::dense(&spec, &mut rng).unwrap();
        let mut model = Model::with_adapters(&base, AdapterKind::Lora, 2, 1.0, HeadMode::Adapter, &mut rng).unwrap();
        for (k, m) in model.trainable_mut().into_iter().enumerate() {
            *m = Matrix::from_fn(m.rows(), m.cols(), |i, j| ((i * 3 + j * 5 + k) % 7) as f64 * 0.1 - 0.3);
        }
        let x = Matrix::from_fn(6, 4, |i, j| ((i * 5 + j * 3) % 11) as f64 * 0.2 - 1.0);
        (model, x, vec![0, 1, 2, 2, 1, 0])
    }

    fn value_and_grads(model: &Model<f64>, x: &Matrix<f64>, y: &[usize], masks: &[MaskSet]) -> (f64, Vec<Matrix<f64>>) {
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let loss = multi_instance_loss(model, &mut g, &bound, Batch { x, labels: y }, masks).unwrap();
        g.backward(loss).unwrap();
        (g.scalar(loss), model.trainable_grads(&g, &bound))
    }

    #[test]
    fn zero_instances_is_config_error() {
        let (model, x, y) = fixture();
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let err = multi_instance_loss(&model, &mut g, &bound, Batch { x: &x, labels: &y }, &[]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn single_instance_equals_masked_loss() {
        let (model, x, y) = fixture();
        let masks = crate::lora::sample_instances(&model.adapter_shapes(), 0.5, MaskKey::train(1, 0, 0), 1).unwrap();
        let (v, _) = value_and_grads(&model, &x, &y, &masks);
        let logits = model.logits(&x, Some(&masks[0])).unwrap();
        let (direct, _) = crate::tensor::cross_entropy_forward(&logits, &y);
        assert!((v - direct).abs() < 1e-12);
    }

    #[test]
    fn zero_rate_equals_unmasked_loss() {
        let (model, x, y) = fixture();
        let masks = crate::lora::sample_instances(&model.adapter_shapes(), 0.0, MaskKey::train(1, 0, 0), 3).unwrap();
        let (v, _) = value_and_grads(&model, &x, &y, &masks);
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let plain = task_loss(&model, &mut g, &bound, Batch { x: &x, labels: &y }).unwrap();
        assert!((v - g.scalar(plain)).abs() < 1e-12);
    }

    #[test]
    fn two_fixed_masks_average_two_forwards() {
        let (model, x, y) = fixture();
        let shapes = model.adapter_shapes();
        let m1 = MaskSet::from_masks(0, shapes.iter().map(|&(l, n1, n2)| DropoutMask {
            layer: l,
            p: 0.5,
            input: (0..n2).map(|j| j % 2 == 0).collect(),
            output: (0..n1).map(|i| i % 3 != 1).collect(),
        }).collect());
        let m2 = MaskSet::from_masks(1, shapes.iter().map(|&(l, n1, n2)| DropoutMask {
            layer: l,
            p: 0.5,
            input: (0..n2).map(|j| j % 2 == 1).collect(),
            output: (0..n1).map(|i| i != 0).collect(),
        }).collect());
        let (v, grads) = value_and_grads(&model, &x, &y, &[m1.clone(), m2.clone()]);
        let (l1, g1) = value_and_grads(&model, &x, &y, std::slice::from_ref(&m1));
        let (l2, g2) = value_and_grads(&model, &x, &y, std::slice::from_ref(&m2));
        assert!((v - (l1 + l2) / 2.0).abs() < 1e-12);
        for ((g, a), b) in grads.iter().zip(&g1).zip(&g2) {
            let avg = a.add(b).unwrap().scale(0.5);
            assert!(g.sub(&avg).unwrap().max_abs() < 1e-10);
        }
    }

    #[test]
    fn copies_of_one_mask_equal_single_instance() {
        let (model, x, y) = fixture();
        let one = crate::lora::sample_instances(&model.adapter_shapes(), 0.3, MaskKey::train(2, 0, 0), 1).unwrap();
        let many = vec![one[0].clone(); 5];
        let (a, _) = value_and_grads(&model, &x, &y, &one);
        let (b, _) = value_and_grads(&model, &x, &y, &many);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn explicit_penalty_closed_form() {
        let (model, x, y) = fixture();
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let task = task_loss(&model, &mut g, &bound, Batch { x: &x, labels: &y }).unwrap();
        let full = explicit_regularized_loss(&model, &mut g, &bound, Batch { x: &x, labels: &y }, 0.7, 0.3).unwrap();
        let norm: f64 = model.merged_deltas(None).unwrap().iter().map(|d| d.sum_squares()).sum();
        let expected = g.scalar(task) + 0.7 * 0.51 * norm;
        assert!((g.scalar(full) - expected).abs() < 1e-12);

        let zero = explicit_regularized_loss(&model, &mut g, &bound, Batch { x: &x, labels: &y }, 0.0, 0.3).unwrap();
        assert_eq!(g.scalar(zero), g.scalar(task));
    }

    #[test]
    fn penalty_vanishes_at_init_and_for_hand_delta() {
        let spec = ModelSpec { input_dim: 2, hidden: vec![], classes: 2 };
        let mut rng = rng_from(&[11]);
        let base = Model::<f64>::dense(&spec, &mut rng).unwrap();
        let fresh = Model::with_adapters(&base, AdapterKind::Lora, 1, 1.0, HeadMode::Adapter, &mut rng).unwrap();
        let mut g = Graph::new();
        let bound = fresh.bind(&mut g);
        let pen = sparsity_penalty(&fresh, &mut g, &bound, 5.0, 0.5).unwrap();
        assert_eq!(g.scalar(pen), 0.0);

        // ΔW = [[3, 4], [0, 0]] so ‖ΔW‖² = 25 and the penalty is 0.75·25.
        let Layer::Lora { adapter, bias } = &fresh.layers()[0] else { unreachable!() };
        let mut adapter = adapter.clone();
        adapter.a = Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        adapter.b = Matrix::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        let model = Model::new(vec![Layer::Lora { adapter, bias: bias.clone() }]).unwrap();
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let pen = sparsity_penalty(&model, &mut g, &bound, 1.0, 0.5).unwrap();
        assert_eq!(g.scalar(pen), 18.75);
    }
}
