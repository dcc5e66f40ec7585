//! The full enhancement network: encoder, dual-path transformer processing
//! module (DPTPM), decoder and complex-mask resynthesis.

pub mod checkpoint;
mod config;
mod network;

use std::collections::BTreeMap;

pub use config::ModelConfig;
pub use network::{
    apply_mask, apply_mask_on_tape, identity_mask, ConvUnit, Decoder, DenseBlock, DptFsNet, Dptpm, DualPathBlock,
    EnhanceVars, Encoder, MaskSource, PathSelection,
};

use crate::nn::ParamStore;

/// Scalar parameter counts grouped by name prefix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub per_component: BTreeMap<String, usize>,
    pub total: usize,
}

/// Counts parameters, grouping names by their first `depth` dotted segments.
pub fn count_params(store: &ParamStore, depth: usize) -> ParamCount {
    let mut per_component = BTreeMap::new();
    for (name, t) in store.iter() {
        let key = name.split('.').take(depth.max(1)).collect::<Vec<_>>().join(".");
        *per_component.entry(key).or_insert(0) += t.numel();
    }
    ParamCount {
        total: store.numel(),
        per_component,
    }
}

/// Parameter count reported for the full-size model in the original work.
pub const REFERENCE_PARAMS: usize = 880_000;
