//! Low-rank adapters and LoRA Dropout masks.

mod layer;
mod mask;

pub use layer::{graph_delta, graph_merged_delta, AdaLoraLayer, AdapterNodes, LoraLayer};
pub use mask::{
    check_rate, entry_zero_probability, sample_instances, DropoutMask, MaskKey, MaskSet, Phase,
};
