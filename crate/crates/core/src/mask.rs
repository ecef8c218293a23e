//! Sets of kept node indices shared by the stochastic-backprop layers of a step.

use crate::error::{Error, Result};

/// Layout of the node axis a mask indexes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskAxis {
    /// One node per frame (or chunk).
    Temporal,
    /// One node per `(t, h, w)` cell, flattened row-major.
    SpatioTemporal { t: usize, h: usize, w: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleMask {
    kept: Vec<usize>,
    total: usize,
    axis: MaskAxis,
}

impl SampleMask {
    /// Sorts `kept`; duplicates and out-of-range indices are rejected.
    pub fn new(mut kept: Vec<usize>, total: usize, axis: MaskAxis) -> Result<Self> {
        kept.sort_unstable();
        if let Some(&bad) = kept.iter().find(|&&i| i >= total) {
            return Err(Error::Index {
                index: bad,
                len: total,
            });
        }
        if kept.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("mask contains duplicate indices".into()));
        }
        if let MaskAxis::SpatioTemporal { t, h, w } = axis {
            if t * h * w != total {
                return Err(Error::Config(format!(
                    "spatio-temporal axis {t}x{h}x{w} does not cover {total} nodes"
                )));
            }
        }
        Ok(Self { kept, total, axis })
    }

    pub fn temporal(kept: Vec<usize>, total: usize) -> Result<Self> {
        Self::new(kept, total, MaskAxis::Temporal)
    }

    pub fn full(total: usize) -> Self {
        Self {
            kept: (0..total).collect(),
            total,
            axis: MaskAxis::Temporal,
        }
    }

    pub fn empty(total: usize) -> Self {
        Self {
            kept: Vec::new(),
            total,
            axis: MaskAxis::Temporal,
        }
    }

    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    pub fn len(&self) -> usize {
        self.kept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn axis(&self) -> MaskAxis {
        self.axis
    }

    pub fn is_full(&self) -> bool {
        self.kept.len() == self.total
    }

    /// Effective keep-ratio `|mask| / n`.
    pub fn ratio(&self) -> f64 {
        self.kept.len() as f64 / self.total as f64
    }

    pub fn contains(&self, i: usize) -> bool {
        self.kept.binary_search(&i).is_ok()
    }

    /// Expands a per-frame mask to `per_node` consecutive tokens per frame.
    pub fn expand(&self, per_node: usize) -> Self {
        let kept = self
            .kept
            .iter()
            .flat_map(|&i| (i * per_node)..((i + 1) * per_node))
            .collect();
        Self {
            kept,
            total: self.total * per_node,
            axis: self.axis,
        }
    }
}

/// Number of kept nodes for ratio `r` over `n` nodes: `round(r * n)` rounded
/// half up and clamped to `[1, n]`.
pub fn keep_count(n: usize, r: f64) -> usize {
    let raw = (r * n as f64 + 0.5).floor();
    (raw.max(1.0) as usize).min(n)
}
