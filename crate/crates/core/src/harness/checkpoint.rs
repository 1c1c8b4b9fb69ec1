//! JSON checkpoints: `{format_version, model_spec, layers: [...]}` with
//! every matrix as nested row arrays.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{AdaLoraLayer, LoraLayer};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::training::{Layer, Model, ModelSpec};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + DeserializeOwned"))]
pub enum LayerRecord<T> {
    Dense {
        weight: Matrix<T>,
        bias: Matrix<T>,
        trainable: bool,
    },
    Lora {
        w0: Matrix<T>,
        a: Matrix<T>,
        b: Matrix<T>,
        scale: T,
        bias: Matrix<T>,
    },
    Adalora {
        w0: Matrix<T>,
        p: Matrix<T>,
        lambda: Matrix<T>,
        q: Matrix<T>,
        scale: T,
        bias: Matrix<T>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + DeserializeOwned"))]
pub struct Checkpoint<T> {
    pub format_version: u32,
    pub model_spec: ModelSpec,
    pub layers: Vec<LayerRecord<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn from_model(model: &Model<T>, spec: &ModelSpec) -> Self {
        let layers = model
            .layers()
            .iter()
            .map(|layer| match layer {
                Layer::Dense {
                    weight,
                    bias,
                    trainable,
                } => LayerRecord::Dense {
                    weight: weight.clone(),
                    bias: bias.clone(),
                    trainable: *trainable,
                },
                Layer::Lora { adapter, bias } => LayerRecord::Lora {
                    w0: adapter.w0.clone(),
                    a: adapter.a.clone(),
                    b: adapter.b.clone(),
                    scale: adapter.scale,
                    bias: bias.clone(),
                },
                Layer::AdaLora { adapter, bias } => LayerRecord::Adalora {
                    w0: adapter.w0.clone(),
                    p: adapter.p.clone(),
                    lambda: adapter.lambda.clone(),
                    q: adapter.q.clone(),
                    scale: adapter.scale,
                    bias: bias.clone(),
                },
            })
            .collect();
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            model_spec: spec.clone(),
            layers,
        }
    }

    /// Rebuilds the model, checking every layer against `model_spec`.
    pub fn to_model(&self) -> Result<Model<T>> {
        if self.format_version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint format version {} (supported: {CHECKPOINT_VERSION})",
                self.format_version
            )));
        }
        let shapes = self.model_spec.layer_shapes();
        if shapes.len() != self.layers.len() {
            return Err(Error::Load {
                layer: self.layers.len().min(shapes.len()),
                message: format!("spec has {} layers, checkpoint has {}", shapes.len(), self.layers.len()),
            });
        }
        let mut layers = Vec::with_capacity(shapes.len());
        for (l, (record, &expect)) in self.layers.iter().zip(&shapes).enumerate() {
            let load = |message: String| Error::Load { layer: l, message };
            let layer = match record.clone() {
                LayerRecord::Dense {
                    weight,
                    bias,
                    trainable,
                } => Layer::Dense {
                    weight,
                    bias,
                    trainable,
                },
                LayerRecord::Lora { w0, a, b, scale, bias } => Layer::Lora {
                    adapter: LoraLayer::from_parts(w0, a, b, scale).map_err(|e| load(e.to_string()))?,
                    bias,
                },
                LayerRecord::Adalora {
                    w0,
                    p,
                    lambda,
                    q,
                    scale,
                    bias,
                } => Layer::AdaLora {
                    adapter: AdaLoraLayer::from_parts(w0, p, lambda, q, scale).map_err(|e| load(e.to_string()))?,
                    bias,
                },
            };
            if layer.shape() != expect {
                return Err(load(format!("weight shape {:?}, spec expects {expect:?}", layer.shape())));
            }
            layers.push(layer);
        }
        Model::new(layers)
    }
}

impl<T: Scalar + Serialize> Checkpoint<T> {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

impl<T: Scalar + DeserializeOwned> Checkpoint<T> {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use crate::training::{AdapterKind, HeadMode};

    fn spec() -> ModelSpec {
        ModelSpec {
            input_dim: 3,
            hidden: vec![5],
            classes: 2,
        }
    }

    #[test]
    fn adapter_model_round_trips() {
        let mut rng = rng_from(&[9]);
        let dense = Model::<f64>::dense(&spec(), &mut rng).unwrap();
        for kind in [AdapterKind::Lora, AdapterKind::Adalora] {
            let model = Model::with_adapters(&dense, kind, 2, 0.5, HeadMode::Trainable, &mut rng).unwrap();
            let ck = Checkpoint::from_model(&model, &spec());
            let text = ck.to_json().unwrap();
            let back = Checkpoint::<f64>::from_json(&text).unwrap();
            assert_eq!(back.to_model().unwrap(), model);
            assert_eq!(back.to_json().unwrap(), text);
        }
    }

    #[test]
    fn wrong_width_names_layer() {
        let mut rng = rng_from(&[10]);
        let dense = Model::<f64>::dense(&spec(), &mut rng).unwrap();
        let mut ck = Checkpoint::from_model(&dense, &spec());
        ck.model_spec.hidden = vec![4];
        match ck.to_model() {
            Err(Error::Load { layer: 0, .. }) => {}
            other => panic!("expected load error on layer 0, got {other:?}"),
        }
    }
}
