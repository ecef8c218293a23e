//! Stochastic backpropagation: node samplers and the layer wrapper.
//!
//! A wrapped layer computes its forward pass exactly over every node but keeps
//! backward paths only through the nodes of a [`SampleMask`]. One mask is drawn
//! per training step and shared by every wrapped layer; layers at or above the
//! configured boundary keep their full backward pass.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use crate::autograd::{Gradients, Region, RowSelect, Tape, Var};
use crate::error::{config, Error, Result};
use crate::mask::{keep_count, MaskAxis, SampleMask};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Keep-ratios the 3-D checkerboard sampler supports.
pub const CHECKERBOARD_RATIOS: [f64; 3] = [0.5, 0.25, 0.125];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SamplerKind {
    UniformRandom,
    DiverseFeature,
    DiverseGrad,
    Checkerboard3d,
}

impl SamplerKind {
    pub const ALL: [SamplerKind; 4] = [
        SamplerKind::UniformRandom,
        SamplerKind::DiverseFeature,
        SamplerKind::DiverseGrad,
        SamplerKind::Checkerboard3d,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::UniformRandom => "uniform_random",
            SamplerKind::DiverseFeature => "diverse_feature",
            SamplerKind::DiverseGrad => "diverse_grad",
            SamplerKind::Checkerboard3d => "checkerboard3d",
        }
    }
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SamplerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| config(format!("unknown sampler `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SbpConfig {
    pub keep_ratio: f64,
    pub sampler: SamplerKind,
    /// Layers below this index (in the model's own numbering) are wrapped.
    pub boundary: usize,
    pub resample_each_step: bool,
    /// Draw a separate mask for every wrapped layer instead of sharing one.
    pub independent_per_layer: bool,
    pub seed: u64,
}

impl SbpConfig {
    pub fn new(keep_ratio: f64, sampler: SamplerKind, boundary: usize, seed: u64) -> Result<Self> {
        let cfg = Self {
            keep_ratio,
            sampler,
            boundary,
            resample_each_step: true,
            independent_per_layer: false,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        check_ratio(self.keep_ratio)?;
        if self.sampler == SamplerKind::Checkerboard3d {
            checkerboard_level(self.keep_ratio)?;
        }
        Ok(())
    }
}

fn check_ratio(r: f64) -> Result<()> {
    if r > 0.0 && r <= 1.0 {
        Ok(())
    } else {
        Err(config(format!("keep-ratio must be in (0, 1], got {r}")))
    }
}

/// Picks one position per chunk of `0..n` and maps it through `order`.
///
/// With `k = keep_count(n, r)`, the chunks are consecutive runs of
/// `round(1/r)` positions (the last one possibly shorter) whenever that gives
/// exactly `k` chunks, and otherwise `k` runs of near-equal length.
fn pick_per_chunk(order: &[usize], r: f64, rng: &mut Rng) -> Vec<usize> {
    let n = order.len();
    let k = keep_count(n, r);
    let bounds = chunk_bounds(n, r, k);
    let mut kept: Vec<usize> = bounds
        .into_iter()
        .map(|(lo, hi)| order[lo + rng.below(hi - lo)])
        .collect();
    kept.sort_unstable();
    kept
}

/// Half-open chunk ranges used by the sorted-chunk samplers.
pub fn chunk_bounds(n: usize, r: f64, k: usize) -> Vec<(usize, usize)> {
    let size = ((1.0 / r) + 0.5).floor().max(1.0) as usize;
    if n.div_ceil(size) == k {
        (0..k).map(|j| (j * size, ((j + 1) * size).min(n))).collect()
    } else {
        (0..k).map(|j| (j * n / k, (j + 1) * n / k)).collect()
    }
}

/// Uniform random sampler: one node drawn from each consecutive chunk.
pub fn sample_uniform(n: usize, r: f64, rng: &mut Rng) -> Result<SampleMask> {
    check_ratio(r)?;
    if n == 0 {
        return Err(config("cannot sample from zero nodes"));
    }
    let order: Vec<usize> = (0..n).collect();
    SampleMask::temporal(pick_per_chunk(&order, r, rng), n)
}

/// Ascending order of `keys`, ties broken by index.
fn sorted_order(keys: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by(|&a, &b| keys[a].total_cmp(&keys[b]).then(a.cmp(&b)));
    order
}

/// Diverse-feature sampler: nodes sorted by feature L2 norm, then one drawn
/// per chunk of the sorted list.
pub fn sample_diverse_feature<T: Scalar>(
    features: &Tensor<T>,
    r: f64,
    rng: &mut Rng,
) -> Result<SampleMask> {
    check_ratio(r)?;
    let n = features.rows();
    if n == 0 {
        return Err(config("cannot sample from zero nodes"));
    }
    let norms: Vec<f64> = (0..n)
        .map(|i| {
            features
                .row(i)
                .iter()
                .map(|v| v.as_f64() * v.as_f64())
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    SampleMask::temporal(pick_per_chunk(&sorted_order(&norms), r, rng), n)
}

/// Diverse-grad sampler: nodes sorted by gradient magnitude, then one drawn
/// per chunk of the sorted list.
pub fn sample_diverse_grad<T: Scalar>(
    grad_magnitudes: &Tensor<T>,
    r: f64,
    rng: &mut Rng,
) -> Result<SampleMask> {
    check_ratio(r)?;
    let n = grad_magnitudes.numel();
    if n == 0 {
        return Err(config("cannot sample from zero nodes"));
    }
    let keys: Vec<f64> = grad_magnitudes.data().iter().map(|v| v.as_f64().abs()).collect();
    SampleMask::temporal(pick_per_chunk(&sorted_order(&keys), r, rng), n)
}

fn checkerboard_level(r: f64) -> Result<usize> {
    CHECKERBOARD_RATIOS
        .iter()
        .position(|&c| (c - r).abs() < 1e-12)
        .map(|i| i + 1)
        .ok_or_else(|| {
            config(format!(
                "checkerboard3d supports keep-ratios {CHECKERBOARD_RATIOS:?}, got {r}"
            ))
        })
}

/// Whether cell `(t, h, w)` belongs to the parity pattern of a level.
///
/// * level 1 (r = 1/2): `t + h + w` even;
/// * level 2 (r = 1/4): `t`, `h` and `w` share one parity;
/// * level 3 (r = 1/8): `t`, `h` and `w` all even.
pub fn checkerboard_cell(level: usize, t: usize, h: usize, w: usize) -> bool {
    match level {
        1 => (t + h + w) % 2 == 0,
        2 => t % 2 == h % 2 && h % 2 == w % 2,
        _ => t % 2 == 0 && h % 2 == 0 && w % 2 == 0,
    }
}

/// Deterministic 3-D checkerboard over `(T, H, W)` cells.
pub fn sample_checkerboard3d(dims: (usize, usize, usize), r: f64) -> Result<SampleMask> {
    sample_checkerboard3d_shifted(dims, r, (0, 0, 0))
}

/// Checkerboard with the pattern shifted by a parity phase per axis.
///
/// When every extent is even the pattern keeps exactly `r` of the cells. For
/// odd extents the selection is trimmed (or topped up with the first
/// unselected cells) so that it always holds `keep_count(n, r)` cells.
pub fn sample_checkerboard3d_shifted(
    dims: (usize, usize, usize),
    r: f64,
    phase: (usize, usize, usize),
) -> Result<SampleMask> {
    let level = checkerboard_level(r)?;
    let (t_n, h_n, w_n) = dims;
    let n = t_n * h_n * w_n;
    if n == 0 {
        return Err(config("checkerboard over an empty grid"));
    }
    let k = keep_count(n, r);
    let mut kept = Vec::with_capacity(k);
    let mut rest = Vec::new();
    for t in 0..t_n {
        for h in 0..h_n {
            for w in 0..w_n {
                let idx = (t * h_n + h) * w_n + w;
                if checkerboard_cell(level, t + phase.0, h + phase.1, w + phase.2) {
                    kept.push(idx);
                } else {
                    rest.push(idx);
                }
            }
        }
    }
    kept.truncate(k);
    let missing = k - kept.len();
    kept.extend(rest.into_iter().take(missing));
    SampleMask::new(
        kept,
        n,
        MaskAxis::SpatioTemporal {
            t: t_n,
            h: h_n,
            w: w_n,
        },
    )
}

/// Layout of the nodes a model exposes to the samplers: `frames` positions
/// along time, each split into an `h x w` grid of tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeGrid {
    pub frames: usize,
    pub h: usize,
    pub w: usize,
}

impl NodeGrid {
    pub fn temporal(frames: usize) -> Self {
        Self { frames, h: 1, w: 1 }
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.h * self.w
    }

    pub fn len(&self) -> usize {
        self.frames * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-experiment mask source: owns the sampler stream, the previous step's
/// gradient magnitudes (for the diverse-grad sampler) and the fixed mask when
/// masks are not resampled.
#[derive(Debug, Clone)]
pub struct StepSampler {
    config: SbpConfig,
    rng: Rng,
    last_grad: Option<Vec<f64>>,
    fixed: Option<Rc<SampleMask>>,
}

/// RNG stream reserved for mask sampling.
const SAMPLER_STREAM: u64 = 0x5b9;

impl StepSampler {
    pub fn new(config: SbpConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            rng: Rng::with_stream(config.seed, SAMPLER_STREAM),
            config,
            last_grad: None,
            fixed: None,
        })
    }

    pub fn config(&self) -> &SbpConfig {
        &self.config
    }

    /// Records per-frame gradient magnitudes observed at the boundary.
    pub fn observe_grad(&mut self, magnitudes: Vec<f64>) {
        self.last_grad = Some(magnitudes);
    }

    /// Draws the mask for one step. `features` holds one row per frame and is
    /// required by the diverse-feature sampler only.
    pub fn draw<T: Scalar>(
        &mut self,
        grid: NodeGrid,
        features: Option<&Tensor<T>>,
    ) -> Result<Rc<SampleMask>> {
        if !self.config.resample_each_step {
            if let Some(m) = &self.fixed {
                if m.total() == grid.len() {
                    return Ok(m.clone());
                }
            }
        }
        let r = self.config.keep_ratio;
        let per_frame = grid.tokens_per_frame();
        let mask = match self.config.sampler {
            SamplerKind::UniformRandom => sample_uniform(grid.frames, r, &mut self.rng)?.expand(per_frame),
            SamplerKind::DiverseFeature => {
                let f = features.ok_or_else(|| {
                    config("diverse_feature sampler needs candidate node features")
                })?;
                if f.rows() != grid.frames {
                    return Err(Error::Index {
                        index: f.rows(),
                        len: grid.frames,
                    });
                }
                sample_diverse_feature(f, r, &mut self.rng)?.expand(per_frame)
            }
            SamplerKind::DiverseGrad => match &self.last_grad {
                Some(g) if g.len() == grid.frames && g.iter().any(|&v| v != 0.0) => {
                    let mags = Tensor::<f64>::new(vec![g.len()], g.clone())?;
                    sample_diverse_grad(&mags, r, &mut self.rng)?.expand(per_frame)
                }
                _ => sample_uniform(grid.frames, r, &mut self.rng)?.expand(per_frame),
            },
            SamplerKind::Checkerboard3d => {
                let phase = (self.rng.below(2), self.rng.below(2), self.rng.below(2));
                sample_checkerboard3d_shifted((grid.frames, grid.h, grid.w), r, phase)?
            }
        };
        let mask = Rc::new(mask);
        if !self.config.resample_each_step {
            self.fixed = Some(mask.clone());
        }
        Ok(mask)
    }
}

/// How one layer slot is executed in a step.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerExec {
    /// Plain recording, with gates at the slot's input and output.
    Dense,
    /// Inputs cached; the slot is re-executed during backward.
    Checkpoint,
    /// Stochastic backprop. `retain = false` composes it with checkpointing.
    Sbp { mask: Rc<SampleMask>, retain: bool },
}

/// Execution of every layer slot of a model for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct ExecPlan {
    pub layers: Vec<LayerExec>,
}

impl ExecPlan {
    pub fn dense(slots: usize) -> Self {
        Self {
            layers: vec![LayerExec::Dense; slots],
        }
    }

    pub fn checkpointed(slots: usize) -> Self {
        Self {
            layers: vec![LayerExec::Checkpoint; slots],
        }
    }

    pub fn exec(&self, slot: usize) -> &LayerExec {
        self.layers.get(slot).unwrap_or(&LayerExec::Dense)
    }

    /// Slots running under stochastic backprop.
    pub fn wrapped(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, e)| matches!(e, LayerExec::Sbp { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    /// The mask shared by the wrapped slots, if any.
    pub fn shared_mask(&self) -> Option<&Rc<SampleMask>> {
        self.layers.iter().find_map(|e| match e {
            LayerExec::Sbp { mask, .. } => Some(mask),
            _ => None,
        })
    }
}

/// A model made of layer slots numbered bottom-up.
pub trait LayeredModel {
    fn num_slots(&self) -> usize;

    /// Slots wrapped for a given boundary; out-of-range boundaries are a
    /// configuration error.
    fn wrapped_slots(&self, boundary: usize) -> Result<Vec<usize>>;

    /// Node layout the mask is drawn over.
    fn node_grid(&self) -> NodeGrid;
}

/// Builds the execution plan for one training step: a mask is drawn (once,
/// or per layer when configured) and every slot below the boundary is
/// wrapped; the other slots stay dense.
pub fn apply_sbp_to_model<M: LayeredModel, T: Scalar>(
    model: &M,
    sampler: &mut StepSampler,
    features: Option<&Tensor<T>>,
    compose_checkpoint: bool,
) -> Result<ExecPlan> {
    let wrapped = model.wrapped_slots(sampler.config().boundary)?;
    let mut plan = ExecPlan::dense(model.num_slots());
    if wrapped.is_empty() {
        return Ok(plan);
    }
    let grid = model.node_grid();
    let shared = sampler.draw(grid, features)?;
    let independent = sampler.config().independent_per_layer;
    for (n, slot) in wrapped.into_iter().enumerate() {
        let mask = if independent && n > 0 {
            sampler.draw(grid, features)?
        } else {
            shared.clone()
        };
        plan.layers[slot] = LayerExec::Sbp {
            mask,
            retain: !compose_checkpoint,
        };
    }
    Ok(plan)
}

/// Records `region` for layer `slot` according to `exec`.
///
/// `side_full` is set by regions that mix nodes (attention): they are
/// replayed on the full first input and asked for the masked rows only.
pub fn run_layer<T: Scalar>(
    tape: &mut Tape<T>,
    slot: usize,
    exec: &LayerExec,
    region: Rc<dyn Region<T>>,
    inputs: &[Var],
    side_full: bool,
) -> Result<Var> {
    let prev = tape.set_layer(Some(slot));
    let out = (|| match exec {
        LayerExec::Dense => {
            let mut inputs = inputs.to_vec();
            inputs[0] = tape.gate(inputs[0], slot)?;
            let y = region.record(tape, &inputs, RowSelect::All)?;
            tape.gate(y, slot)
        }
        LayerExec::Checkpoint => tape.checkpoint(region, inputs),
        LayerExec::Sbp { mask, retain } => tape.sbp(region, inputs, mask, side_full, *retain),
    })();
    tape.set_layer(prev);
    out
}

/// Wraps an arbitrary region with stochastic backprop over `mask`.
pub fn sbp_wrap<T: Scalar>(region: Rc<dyn Region<T>>, mask: SampleMask, side_full: bool) -> SbpOp<T> {
    SbpOp {
        region,
        mask,
        side_full,
        retain: true,
        ctx: None,
    }
}

struct SbpCtx<T: Scalar> {
    tape: Tape<T>,
    leaves: Vec<Var>,
    out: Var,
}

/// A stand-alone wrapped op with explicit forward and backward calls.
///
/// `forward` computes the exact output and keeps the sampled cache;
/// `backward` takes the upstream gradient of the full output and returns one
/// gradient per input (`None` for inputs that do not require gradients).
pub struct SbpOp<T: Scalar> {
    region: Rc<dyn Region<T>>,
    mask: SampleMask,
    side_full: bool,
    retain: bool,
    ctx: Option<SbpCtx<T>>,
}

impl<T: Scalar> SbpOp<T> {
    /// Keeps only the (sampled) inputs and re-executes during backward.
    pub fn recompute(mut self) -> Self {
        self.retain = false;
        self
    }

    pub fn mask(&self) -> &SampleMask {
        &self.mask
    }

    /// `inputs[0]` is the node-axis input; `requires_grad[i]` says which inputs
    /// get gradients. Other inputs are treated as parameters.
    pub fn forward(&mut self, inputs: &[Tensor<T>], requires_grad: &[bool]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let req = requires_grad.get(i).copied().unwrap_or(false);
                if i == 0 {
                    tape.input(t.clone(), req)
                } else if req {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        let out = tape.sbp(self.region.clone(), &leaves, &self.mask, self.side_full, self.retain)?;
        let y = tape.value(out).clone();
        self.ctx = Some(SbpCtx { tape, leaves, out });
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let ctx = self
            .ctx
            .as_mut()
            .ok_or_else(|| Error::State("backward called before forward".into()))?;
        let grads: Gradients<T> = ctx.tape.backward_seeded(ctx.out, dy.clone(), None, &[])?;
        Ok(ctx
            .leaves
            .iter()
            .map(|&l| {
                if ctx.tape.requires_grad(l) {
                    grads.get(l).cloned()
                } else {
                    None
                }
            })
            .collect())
    }

    /// Cached elements held between forward and backward.
    pub fn cached_elements(&self) -> u64 {
        self.ctx
            .as_ref()
            .map_or(0, |c| c.tape.memory_stats().cached_elements_total)
    }
}
