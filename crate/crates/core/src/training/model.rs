use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{graph_delta, graph_merged_delta, AdaLoraLayer, AdapterNodes, LoraLayer, MaskSet};
use crate::rng::LabRng;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Matrix, NodeId};

/// Layer widths of a ReLU MLP classifier.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
}

impl ModelSpec {
    /// `(n_out, n_in)` per linear layer, input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.hidden);
        widths.push(self.classes);
        widths.windows(2).map(|w| (w[1], w[0])).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterKind {
    Lora,
    Adalora,
}

/// How the classification head is treated when adapters are attached.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum HeadMode {
    /// Head gets an adapter like every other layer.
    #[default]
    Adapter,
    /// Head stays a dense layer and is trained directly.
    Trainable,
    /// Head stays a frozen dense layer.
    Frozen,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    Dense {
        weight: Matrix<T>,
        bias: Matrix<T>,
        trainable: bool,
    },
    Lora {
        adapter: LoraLayer<T>,
        bias: Matrix<T>,
    },
    AdaLora {
        adapter: AdaLoraLayer<T>,
        bias: Matrix<T>,
    },
}

impl<T: Scalar> Layer<T> {
    /// `(n_out, n_in)`
    pub fn shape(&self) -> (usize, usize) {
        match self {
            Layer::Dense { weight, .. } => weight.shape(),
            Layer::Lora { adapter, .. } => adapter.w0.shape(),
            Layer::AdaLora { adapter, .. } => adapter.w0.shape(),
        }
    }

    pub fn is_adapter(&self) -> bool {
        !matches!(self, Layer::Dense { .. })
    }

    /// Parameters in a fixed order with their trainable flag.
    pub fn params(&self) -> Vec<(&Matrix<T>, bool)> {
        match self {
            Layer::Dense {
                weight,
                bias,
                trainable,
            } => vec![(weight, *trainable), (bias, *trainable)],
            Layer::Lora { adapter, bias } => vec![
                (&adapter.w0, false),
                (&adapter.a, true),
                (&adapter.b, true),
                (bias, false),
            ],
            Layer::AdaLora { adapter, bias } => vec![
                (&adapter.w0, false),
                (&adapter.p, true),
                (&adapter.lambda, true),
                (&adapter.q, true),
                (bias, false),
            ],
        }
    }

    fn params_mut(&mut self) -> Vec<(&mut Matrix<T>, bool)> {
        match self {
            Layer::Dense {
                weight,
                bias,
                trainable,
            } => vec![(weight, *trainable), (bias, *trainable)],
            Layer::Lora { adapter, bias } => vec![
                (&mut adapter.w0, false),
                (&mut adapter.a, true),
                (&mut adapter.b, true),
                (bias, false),
            ],
            Layer::AdaLora { adapter, bias } => vec![
                (&mut adapter.w0, false),
                (&mut adapter.p, true),
                (&mut adapter.lambda, true),
                (&mut adapter.q, true),
                (bias, false),
            ],
        }
    }

    fn forward(&self, x: &Matrix<T>, mask: Option<&crate::lora::DropoutMask>) -> Result<Matrix<T>> {
        let (pre, bias) = match self {
            Layer::Dense { weight, bias, .. } => {
                if x.cols() != weight.cols() {
                    return Err(Error::dim("dense forward", x.shape(), weight.shape()));
                }
                (x.matmul(&weight.transpose())?, bias)
            }
            Layer::Lora { adapter, bias } => (adapter.forward(x, mask)?, bias),
            Layer::AdaLora { adapter, bias } => (adapter.forward(x, mask)?, bias),
        };
        Ok(Matrix::from_fn(pre.rows(), pre.cols(), |i, j| pre[(i, j)] + bias[(0, j)]))
    }
}

/// Graph leaves for every parameter of a model, in [`Model::params`] order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    ids: Vec<NodeId>,
    offsets: Vec<usize>,
}

impl BoundParams {
    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    fn layer(&self, l: usize) -> &[NodeId] {
        let end = self.offsets.get(l + 1).copied().unwrap_or(self.ids.len());
        &self.ids[self.offsets[l]..end]
    }
}

/// ReLU MLP whose linear layers may carry low-rank adapters.
///
/// The parameter snapshot `θ⁰` is taken at construction and never changes;
/// `Δθ` is always the current parameters minus that snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    layers: Vec<Layer<T>>,
    theta0: Vec<Matrix<T>>,
}

impl<T: Scalar> Model<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("model needs at least one layer".into()));
        }
        for (l, w) in layers.windows(2).enumerate() {
            if w[0].shape().0 != w[1].shape().1 {
                return Err(Error::Load {
                    layer: l + 1,
                    message: format!(
                        "input width {} does not match previous output width {}",
                        w[1].shape().1,
                        w[0].shape().0
                    ),
                });
            }
        }
        for (l, layer) in layers.iter().enumerate() {
            let bias = layer.params().last().map(|(b, _)| b.shape()).unwrap_or((0, 0));
            if bias != (1, layer.shape().0) {
                return Err(Error::Load {
                    layer: l,
                    message: format!("bias shape {bias:?}, expected (1, {})", layer.shape().0),
                });
            }
        }
        let theta0 = layers
            .iter()
            .flat_map(|l| l.params().into_iter().map(|(m, _)| m.clone()))
            .collect();
        Ok(Model { layers, theta0 })
    }

    /// Dense MLP with `W ~ U(-1/√n_in, 1/√n_in)` and zero biases, all trainable.
    pub fn dense(spec: &ModelSpec, rng: &mut LabRng) -> Result<Self> {
        if spec.classes < 2 || spec.input_dim == 0 || spec.hidden.contains(&0) {
            return Err(Error::Config(format!("invalid model spec {spec:?}")));
        }
        let layers = spec
            .layer_shapes()
            .into_iter()
            .map(|(n_out, n_in)| {
                let bound = 1.0 / (n_in as f64).sqrt();
                Layer::Dense {
                    weight: Matrix::from_fn(n_out, n_in, |_, _| T::of(rng.random_range(-bound..bound))),
                    bias: Matrix::zeros(1, n_out),
                    trainable: true,
                }
            })
            .collect();
        Self::new(layers)
    }

    /// Freezes a pretrained dense model and attaches adapters. Each layer
    /// uses rank `min(rank, n_out, n_in)`.
    pub fn with_adapters(
        pretrained: &Model<T>,
        kind: AdapterKind,
        rank: usize,
        scale: T,
        head: HeadMode,
        rng: &mut LabRng,
    ) -> Result<Self> {
        let last = pretrained.layers.len() - 1;
        let mut layers = Vec::with_capacity(pretrained.layers.len());
        for (l, layer) in pretrained.layers.iter().enumerate() {
            let Layer::Dense { weight, bias, .. } = layer else {
                return Err(Error::Load {
                    layer: l,
                    message: "expected a dense pretrained layer".into(),
                });
            };
            if l == last && head != HeadMode::Adapter {
                layers.push(Layer::Dense {
                    weight: weight.clone(),
                    bias: bias.clone(),
                    trainable: head == HeadMode::Trainable,
                });
                continue;
            }
            let r = rank.min(weight.rows()).min(weight.cols());
            layers.push(match kind {
                AdapterKind::Lora => Layer::Lora {
                    adapter: LoraLayer::init(weight.clone(), r, scale, rng)?,
                    bias: bias.clone(),
                },
                AdapterKind::Adalora => Layer::AdaLora {
                    adapter: AdaLoraLayer::init(weight.clone(), r, scale, rng)?,
                    bias: bias.clone(),
                },
            });
        }
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].shape().1
    }

    pub fn classes(&self) -> usize {
        self.layers[self.layers.len() - 1].shape().0
    }

    /// `(layer index, n1, n2)` for every adapted layer.
    pub fn adapter_shapes(&self) -> Vec<(usize, usize, usize)> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_adapter())
            .map(|(i, l)| {
                let (n1, n2) = l.shape();
                (i, n1, n2)
            })
            .collect()
    }

    pub fn params(&self) -> Vec<(&Matrix<T>, bool)> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn trainable(&self) -> Vec<&Matrix<T>> {
        self.params().into_iter().filter(|(_, t)| *t).map(|(m, _)| m).collect()
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Matrix<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.params_mut())
            .filter(|(_, t)| *t)
            .map(|(m, _)| m)
            .collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable().iter().map(|m| m.len()).sum()
    }

    /// Snapshot of every parameter taken when the model was built.
    pub fn theta0(&self) -> &[Matrix<T>] {
        &self.theta0
    }

    /// Trainable parameters minus their snapshot.
    pub fn delta_theta(&self) -> Result<Vec<Matrix<T>>> {
        self.params()
            .into_iter()
            .zip(&self.theta0)
            .filter(|((_, t), _)| *t)
            .map(|((m, _), m0)| m.sub(m0))
            .collect()
    }

    /// Re-bases the snapshot on the current parameters.
    pub fn rebase(self) -> Result<Self> {
        Self::new(self.layers)
    }

    pub fn bind(&self, g: &mut Graph<T>) -> BoundParams {
        let mut ids = Vec::new();
        let mut offsets = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            offsets.push(ids.len());
            for (m, trainable) in layer.params() {
                ids.push(g.leaf(m.clone(), trainable));
            }
        }
        BoundParams { ids, offsets }
    }

    /// Uses caller-created nodes, one per parameter in [`Model::params`]
    /// order, instead of fresh leaves. Lets finite-difference checks drive
    /// the model through perturbed parameter values.
    pub fn bind_nodes(&self, ids: &[NodeId]) -> Result<BoundParams> {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut total = 0;
        for layer in &self.layers {
            offsets.push(total);
            total += layer.params().len();
        }
        if ids.len() != total {
            return Err(Error::Contract(format!("model has {total} parameters, got {} nodes", ids.len())));
        }
        Ok(BoundParams {
            ids: ids.to_vec(),
            offsets,
        })
    }

    fn adapter_nodes(layer: &Layer<T>, ids: &[NodeId]) -> Option<AdapterNodes> {
        match layer {
            Layer::Dense { .. } => None,
            Layer::Lora { .. } => Some(AdapterNodes::Lora {
                w0: ids[0],
                a: ids[1],
                b: ids[2],
            }),
            Layer::AdaLora { .. } => Some(AdapterNodes::AdaLora {
                w0: ids[0],
                p: ids[1],
                lambda: ids[2],
                q: ids[3],
            }),
        }
    }

    /// Logits of a (possibly masked) forward pass on the graph.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        bound: &BoundParams,
        x: NodeId,
        masks: Option<&MaskSet>,
    ) -> Result<NodeId> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (l, layer) in self.layers.iter().enumerate() {
            let ids = bound.layer(l);
            let w = g.transpose(ids[0]);
            let mut pre = g.matmul(h, w)?;
            if let Some(nodes) = Self::adapter_nodes(layer, ids) {
                let scale = match layer {
                    Layer::Lora { adapter, .. } => adapter.scale,
                    Layer::AdaLora { adapter, .. } => adapter.scale,
                    Layer::Dense { .. } => unreachable!(),
                };
                let mask = masks.and_then(|m| m.for_layer(l));
                let delta = graph_delta(g, nodes, h, mask, scale)?;
                pre = g.add(pre, delta)?;
            }
            let bias = ids[ids.len() - 1];
            pre = g.add_row(pre, bias)?;
            h = if l == last { pre } else { g.relu(pre) };
        }
        Ok(h)
    }

    /// Merged deltas of all adapted layers as graph nodes (for penalties).
    pub fn merged_deltas_graph(&self, g: &mut Graph<T>, bound: &BoundParams) -> Result<Vec<NodeId>> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            if let Some(nodes) = Self::adapter_nodes(layer, bound.layer(l)) {
                let scale = match layer {
                    Layer::Lora { adapter, .. } => adapter.scale,
                    Layer::AdaLora { adapter, .. } => adapter.scale,
                    Layer::Dense { .. } => unreachable!(),
                };
                out.push(graph_merged_delta(g, nodes, None, scale)?);
            }
        }
        Ok(out)
    }

    /// Merged deltas of all adapted layers.
    pub fn merged_deltas(&self, masks: Option<&MaskSet>) -> Result<Vec<Matrix<T>>> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let mask = masks.and_then(|m| m.for_layer(l));
            match layer {
                Layer::Dense { .. } => {}
                Layer::Lora { adapter, .. } => out.push(adapter.merged_delta(mask)?),
                Layer::AdaLora { adapter, .. } => out.push(adapter.merged_delta(mask)?),
            }
        }
        Ok(out)
    }

    /// Gradients of the trainable parameters after a backward pass.
    pub fn trainable_grads(&self, g: &Graph<T>, bound: &BoundParams) -> Vec<Matrix<T>> {
        self.params()
            .into_iter()
            .zip(bound.ids())
            .filter(|((_, t), _)| *t)
            .map(|(_, id)| g.grad(*id))
            .collect()
    }

    /// Gradients of all parameters (frozen ones are zero).
    pub fn all_grads(&self, g: &Graph<T>, bound: &BoundParams) -> Vec<Matrix<T>> {
        bound.ids().iter().map(|id| g.grad(*id)).collect()
    }

    /// Logits without building a graph.
    pub fn logits(&self, x: &Matrix<T>, masks: Option<&MaskSet>) -> Result<Matrix<T>> {
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let mask = masks.and_then(|m| m.for_layer(l));
            let pre = layer.forward(&h, mask)?;
            h = if l == last { pre } else { pre.map(|v| v.max(T::zero())) };
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::{DropoutMask, MaskKey};
    use crate::rng::rng_from;

    fn spec() -> ModelSpec {
        ModelSpec {
            input_dim: 5,
            hidden: vec![6],
            classes: 3,
        }
    }

    #[test]
    fn fresh_adapters_reproduce_pretrained_output() {
        let mut rng = rng_from(&[1]);
        let base = Model::<f64>::dense(&spec(), &mut rng).unwrap();
        let x = Matrix::from_fn(4, 5, |i, j| (i as f64 - j as f64) * 0.3);
        for kind in [AdapterKind::Lora, AdapterKind::Adalora] {
            let tuned = Model::with_adapters(&base, kind, 4, 1.0, HeadMode::Adapter, &mut rng).unwrap();
            let masks = MaskSet::sample(&tuned.adapter_shapes(), 0.5, MaskKey::train(1, 0, 0), 0).unwrap();
            assert_eq!(tuned.logits(&x, None).unwrap(), base.logits(&x, None).unwrap());
            assert_eq!(tuned.logits(&x, Some(&masks)).unwrap(), base.logits(&x, None).unwrap());
        }
    }

    #[test]
    fn graph_and_plain_forward_agree() {
        let mut rng = rng_from(&[2]);
        let base = Model::<f64>::dense(&spec(), &mut rng).unwrap();
        let mut tuned = Model::with_adapters(&base, AdapterKind::Lora, 3, 0.5, HeadMode::Adapter, &mut rng).unwrap();
        for m in tuned.trainable_mut() {
            *m = m.map(|v| v + 0.25);
        }
        let x = Matrix::from_fn(3, 5, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let masks = MaskSet::sample(&tuned.adapter_shapes(), 0.4, MaskKey::train(9, 1, 2), 1).unwrap();
        let mut g = Graph::new();
        let bound = tuned.bind(&mut g);
        let xn = g.constant(x.clone());
        let out = tuned.forward_graph(&mut g, &bound, xn, Some(&masks)).unwrap();
        let plain = tuned.logits(&x, Some(&masks)).unwrap();
        let diff = g.value(out).sub(&plain).unwrap().max_abs();
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn head_modes() {
        let mut rng = rng_from(&[3]);
        let base = Model::<f64>::dense(&spec(), &mut rng).unwrap();
        let frozen = Model::with_adapters(&base, AdapterKind::Lora, 2, 1.0, HeadMode::Frozen, &mut rng).unwrap();
        assert_eq!(frozen.adapter_shapes(), vec![(0, 6, 5)]);
        let trainable = Model::with_adapters(&base, AdapterKind::Lora, 2, 1.0, HeadMode::Trainable, &mut rng).unwrap();
        // A, B of layer 0 plus the head's weight and bias
        assert_eq!(trainable.trainable().len(), 4);
        assert_eq!(frozen.trainable().len(), 2);
    }

    #[test]
    fn frozen_base_gets_zero_gradient() {
        let mut rng = rng_from(&[4]);
        let base = Model::<f64>::dense(&spec(), &mut rng).unwrap();
        let mut tuned = Model::with_adapters(&base, AdapterKind::Lora, 3, 1.0, HeadMode::Adapter, &mut rng).unwrap();
        for m in tuned.trainable_mut() {
            *m = m.map(|v| v - 0.1);
        }
        let mut g = Graph::new();
        let bound = tuned.bind(&mut g);
        let x = g.constant(Matrix::from_fn(4, 5, |i, j| (i + j) as f64 * 0.2 - 0.5));
        let logits = tuned.forward_graph(&mut g, &bound, x, None).unwrap();
        let loss = g.softmax_cross_entropy(logits, &[0, 1, 2, 1]).unwrap();
        g.backward(loss).unwrap();
        for ((m, trainable), grad) in tuned.params().into_iter().zip(tuned.all_grads(&g, &bound)) {
            if !trainable {
                assert_eq!(grad, Matrix::zeros(m.rows(), m.cols()));
            }
        }
        assert!(tuned.trainable_grads(&g, &bound).iter().any(|gr| gr.max_abs() > 0.0));
    }

    #[test]
    fn mask_for_missing_layer_is_ignored_but_wrong_length_errors() {
        let mut rng = rng_from(&[5]);
        let base = Model::<f64>::dense(&spec(), &mut rng).unwrap();
        let tuned = Model::with_adapters(&base, AdapterKind::Lora, 2, 1.0, HeadMode::Adapter, &mut rng).unwrap();
        let bad = MaskSet::from_masks(0, vec![DropoutMask::ones(0, 5, 6)]);
        let x = Matrix::zeros(1, 5);
        assert!(tuned.logits(&x, Some(&bad)).is_err());
    }

    #[test]
    fn delta_theta_tracks_snapshot() {
        let mut rng = rng_from(&[6]);
        let base = Model::<f64>::dense(&spec(), &mut rng).unwrap();
        let mut tuned = Model::with_adapters(&base, AdapterKind::Lora, 2, 1.0, HeadMode::Adapter, &mut rng).unwrap();
        assert!(tuned.delta_theta().unwrap().iter().all(|d| d.max_abs() == 0.0));
        let snapshot = tuned.theta0().to_vec();
        tuned.trainable_mut()[1].as_mut_slice()[0] += 2.0;
        let delta = tuned.delta_theta().unwrap();
        assert_eq!(delta[1].as_slice()[0], 2.0);
        assert_eq!(tuned.theta0(), &snapshot[..]);
    }
}
