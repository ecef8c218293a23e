//! Cached-activation and elementary-operation accounting.
//!
//! Memory is counted in tensor elements, never bytes. An activation is charged
//! once, when some recorded operation saves it for its backward pass, and the
//! charge goes to the layer of the saving operation. Parameters are never
//! charged.
//!
//! Operation counting convention: one multiply-accumulate is one op for the
//! matrix and attention products; every other kernel costs one op per output
//! element. A backward pass pays the same rate once per differentiated input.

use std::collections::BTreeMap;

/// Layer tag; `None` marks operations recorded outside any layer.
pub type LayerTag = Option<usize>;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MemoryStats {
    pub cached_elements_total: u64,
    pub cached_elements_per_layer: BTreeMap<LayerTag, u64>,
}

impl MemoryStats {
    pub fn charge(&mut self, layer: LayerTag, elements: u64) {
        self.cached_elements_total += elements;
        *self.cached_elements_per_layer.entry(layer).or_default() += elements;
    }

    /// Adds another tape's charges (samples cached together in one step).
    pub fn merge(&mut self, other: &MemoryStats) {
        for (&layer, &n) in &other.cached_elements_per_layer {
            self.charge(layer, n);
        }
    }

    pub fn layer(&self, layer: LayerTag) -> u64 {
        self.cached_elements_per_layer.get(&layer).copied().unwrap_or(0)
    }

    /// Sum over layers for which `pred` holds.
    pub fn sum_where(&self, pred: impl Fn(LayerTag) -> bool) -> u64 {
        self.cached_elements_per_layer
            .iter()
            .filter(|(&l, _)| pred(l))
            .map(|(_, &n)| n)
            .sum()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PhaseOps {
    pub forward: u64,
    pub backward: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OpCounter {
    pub forward_elementary_ops: u64,
    pub backward_elementary_ops: u64,
    pub per_layer: BTreeMap<LayerTag, PhaseOps>,
}

impl OpCounter {
    pub fn add_forward(&mut self, layer: LayerTag, ops: u64) {
        self.forward_elementary_ops += ops;
        self.per_layer.entry(layer).or_default().forward += ops;
    }

    pub fn add_backward(&mut self, layer: LayerTag, ops: u64) {
        self.backward_elementary_ops += ops;
        self.per_layer.entry(layer).or_default().backward += ops;
    }

    pub fn merge(&mut self, other: &OpCounter) {
        for (&layer, ops) in &other.per_layer {
            self.add_forward(layer, ops.forward);
            self.add_backward(layer, ops.backward);
        }
    }

    pub fn total(&self) -> u64 {
        self.forward_elementary_ops + self.backward_elementary_ops
    }
}
