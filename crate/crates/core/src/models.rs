//! Desk-scale video models: a spatial-then-temporal tree model and a small
//! video transformer.
//!
//! Both models process one clip per tape. A training step records every clip
//! of the minibatch on its own tape, runs backward, and sums the parameter
//! gradients and the accounting counters.
//!
//! Caching convention of a transformer block (one `[n x hd]` tensor is `hdn`
//! elements): the pre-norm input, the normalised input shared by the Q/K/V
//! projections, Q, K, V, the pre- and post-softmax attention weights, the
//! post-attention residual, the second norm's output, and the `4hdn`
//! pre-activation and post-activation of the MLP. That is `15hdn + 2hn^2`.
//! Under stochastic backprop the queries, weights and MLP chain shrink to the
//! sampled rows while the input, its norm, K and V stay whole:
//! `4hdn + 11hdnr + 2hn^2 r`.

use std::collections::BTreeSet;
use std::rc::Rc;

use crate::autograd::{Region, RowSelect, Tape, Var};
use crate::error::{config, Error, Result};
use crate::mask::SampleMask;
use crate::rng::Rng;
use crate::sbp::{run_layer, ExecPlan, LayerExec, LayeredModel, NodeGrid};
use crate::scalar::Scalar;
use crate::stats::{MemoryStats, OpCounter};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// Parameters of one transformer block, in region input order.
pub const BLOCK_PARAMS: [&str; 11] = [
    "ln1_g", "ln1_b", "wq", "wk", "wv", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Scalar> {
    pub name: String,
    /// Layer slot owning the parameter.
    pub slot: usize,
    pub value: Tensor<T>,
}

/// Flat, ordered parameter list. Gradients are reported in the same order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T: Scalar> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, slot: usize, value: Tensor<T>) -> usize {
        self.params.push(Param {
            name: name.into(),
            slot,
            value,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, i: usize) -> &Param<T> {
        &self.params[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Shared copies of the values, registered on each clip's tape.
    pub fn shared(&self) -> Vec<Rc<Tensor<T>>> {
        self.params.iter().map(|p| Rc::new(p.value.clone())).collect()
    }
}

fn weight<T: Scalar>(rows: usize, cols: usize, rng: &mut Rng) -> Tensor<T> {
    Tensor::randn(vec![rows, cols], 1.0 / (rows as f64).sqrt(), rng)
}

fn push_block<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, slot: usize, c: usize, rng: &mut Rng) {
    let names = BLOCK_PARAMS.map(|n| format!("{prefix}.{n}"));
    store.push(&names[0], slot, Tensor::ones(vec![c]));
    store.push(&names[1], slot, Tensor::zeros(vec![c]));
    store.push(&names[2], slot, weight(c, c, rng));
    store.push(&names[3], slot, weight(c, c, rng));
    store.push(&names[4], slot, weight(c, c, rng));
    store.push(&names[5], slot, Tensor::ones(vec![c]));
    store.push(&names[6], slot, Tensor::zeros(vec![c]));
    store.push(&names[7], slot, weight(c, 4 * c, rng));
    store.push(&names[8], slot, Tensor::zeros(vec![4 * c]));
    store.push(&names[9], slot, weight(4 * c, c, rng));
    store.push(&names[10], slot, Tensor::zeros(vec![c]));
}

/// Records a pre-norm block: attention (no output projection) and a
/// `fc(4c) -> gelu -> fc` MLP, both with residuals. `p` holds the
/// [`BLOCK_PARAMS`]. With [`RowSelect::Query`] only the selected rows are
/// emitted while keys and values cover every row.
pub fn record_block<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    p: &[Var],
    heads: usize,
    rows: RowSelect<'_>,
) -> Result<Var> {
    let eps = T::of(LN_EPS);
    let a = tape.layer_norm(x, p[0], p[1], eps)?;
    let (xq, aq) = match rows {
        RowSelect::Query(idx) => (tape.gather_rows(x, idx)?, tape.gather_rows(a, idx)?),
        _ => (x, a),
    };
    let q = tape.matmul(aq, p[2])?;
    let k = tape.matmul(a, p[3])?;
    let v = tape.matmul(a, p[4])?;
    let s = tape.attn_scores(q, k, heads)?;
    let w = tape.softmax_rows(s)?;
    let o = tape.attn_apply(w, v)?;
    let x1 = tape.add(xq, o)?;
    let b = tape.layer_norm(x1, p[5], p[6], eps)?;
    let u = tape.matmul(b, p[7])?;
    let u = tape.add_bias(u, p[8])?;
    let g = tape.gelu(u)?;
    let m = tape.matmul(g, p[9])?;
    let m = tape.add_bias(m, p[10])?;
    tape.add(x1, m)
}

/// Region over `[x, BLOCK_PARAMS...]`.
#[derive(Debug, Clone, Copy)]
pub struct BlockRegion {
    pub heads: usize,
}

impl<T: Scalar> Region<T> for BlockRegion {
    fn record(&self, tape: &mut Tape<T>, inputs: &[Var], rows: RowSelect<'_>) -> Result<Var> {
        record_block(tape, inputs[0], &inputs[1..], self.heads, rows)
    }
}

/// Region over `[x, pos, BLOCK_PARAMS...]`: adds the position table, then a
/// block.
#[derive(Debug, Clone, Copy)]
pub struct PosBlockRegion {
    pub heads: usize,
}

impl<T: Scalar> Region<T> for PosBlockRegion {
    fn record(&self, tape: &mut Tape<T>, inputs: &[Var], rows: RowSelect<'_>) -> Result<Var> {
        let pos = match rows {
            RowSelect::Gathered(idx) => tape.gather_rows(inputs[1], idx)?,
            _ => inputs[1],
        };
        let x = tape.add(inputs[0], pos)?;
        let rows = match rows {
            RowSelect::Gathered(_) => RowSelect::All,
            r => r,
        };
        record_block(tape, x, &inputs[2..], self.heads, rows)
    }
}

/// Row-wise region over `[patches, w, b, pos]`: linear patch embedding plus
/// a learned position table.
#[derive(Debug, Clone, Copy)]
pub struct EmbedRegion;

impl<T: Scalar> Region<T> for EmbedRegion {
    fn record(&self, tape: &mut Tape<T>, inputs: &[Var], rows: RowSelect<'_>) -> Result<Var> {
        let (x, pos) = match rows {
            RowSelect::All => (inputs[0], inputs[3]),
            RowSelect::Gathered(idx) => (inputs[0], tape.gather_rows(inputs[3], idx)?),
            RowSelect::Query(idx) => (
                tape.gather_rows(inputs[0], idx)?,
                tape.gather_rows(inputs[3], idx)?,
            ),
        };
        let e = tape.matmul(x, inputs[1])?;
        let e = tape.add_bias(e, inputs[2])?;
        tape.add(e, pos)
    }
}

/// Row-wise region over `[chunks, ln_g, ln_b, w1, b1, w2, b2]`: the per-chunk
/// encoder `norm -> fc -> gelu -> fc`.
#[derive(Debug, Clone, Copy)]
pub struct SpatialRegion;

impl<T: Scalar> Region<T> for SpatialRegion {
    fn record(&self, tape: &mut Tape<T>, inputs: &[Var], rows: RowSelect<'_>) -> Result<Var> {
        let x = match rows {
            RowSelect::Query(idx) => tape.gather_rows(inputs[0], idx)?,
            _ => inputs[0],
        };
        let a = tape.layer_norm(x, inputs[1], inputs[2], T::of(LN_EPS))?;
        let u = tape.matmul(a, inputs[3])?;
        let u = tape.add_bias(u, inputs[4])?;
        let g = tape.gelu(u)?;
        let h = tape.matmul(g, inputs[5])?;
        tape.add_bias(h, inputs[6])
    }
}

/// One transformer block's weights, for stand-alone use.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerBlock<T: Scalar> {
    pub heads: usize,
    pub head_dim: usize,
    /// Values in [`BLOCK_PARAMS`] order.
    pub params: Vec<Tensor<T>>,
}

impl<T: Scalar> TransformerBlock<T> {
    pub fn new(heads: usize, head_dim: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || head_dim == 0 {
            return Err(config("block needs at least one head of width one"));
        }
        let mut store = ParamStore::new();
        push_block(&mut store, "block", 0, heads * head_dim, rng);
        Ok(Self {
            heads,
            head_dim,
            params: store.params.into_iter().map(|p| p.value).collect(),
        })
    }

    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        if x.rank() != 2 || x.cols() != self.width() {
            return Err(Error::Shape {
                op: "transformer_block",
                lhs: x.shape().to_vec(),
                rhs: vec![x.rows(), self.width()],
            });
        }
        Ok(())
    }

    fn leaves(&self, tape: &mut Tape<T>, x: &Tensor<T>) -> Vec<Var> {
        let mut v = vec![tape.input(x.clone(), true)];
        v.extend(self.params.iter().map(|p| tape.param(p.clone())));
        v
    }

    /// Full-cache activation charge: `15hdn + 2hn^2`.
    pub fn full_charge(&self, n: usize) -> u64 {
        let (h, d, n) = (self.heads as u64, self.head_dim as u64, n as u64);
        15 * h * d * n + 2 * h * n * n
    }

    /// Charge under stochastic backprop keeping `k` of `n` tokens:
    /// `4hdn + 11hdk + 2hnk`.
    pub fn sbp_charge(&self, n: usize, k: usize) -> u64 {
        let (h, d, n, k) = (
            self.heads as u64,
            self.head_dim as u64,
            n as u64,
            k as u64,
        );
        4 * h * d * n + 11 * h * d * k + 2 * h * n * k
    }
}

/// Output and cached-element charges of a block recorded on its own tape.
#[derive(Debug, Clone)]
pub struct BlockRun<T: Scalar> {
    pub output: Tensor<T>,
    pub memory: MemoryStats,
    pub ops: OpCounter,
}

pub fn transformer_block_forward<T: Scalar>(x: &Tensor<T>, block: &TransformerBlock<T>) -> Result<Tensor<T>> {
    Ok(transformer_block_run(x, block, &LayerExec::Dense)?.output)
}

/// Records one block with the given execution and reports its charges.
pub fn transformer_block_run<T: Scalar>(
    x: &Tensor<T>,
    block: &TransformerBlock<T>,
    exec: &LayerExec,
) -> Result<BlockRun<T>> {
    block.check(x)?;
    let mut tape = Tape::new();
    let leaves = block.leaves(&mut tape, x);
    let region: Rc<dyn Region<T>> = Rc::new(BlockRegion { heads: block.heads });
    let out = run_layer(&mut tape, 0, exec, region, &leaves, true)?;
    Ok(BlockRun {
        output: tape.value(out).clone(),
        memory: tape.memory_stats(),
        ops: tape.op_counter().clone(),
    })
}

/// A block under stochastic backprop over `mask`.
pub fn transformer_block_sbp<T: Scalar>(
    x: &Tensor<T>,
    block: &TransformerBlock<T>,
    mask: &SampleMask,
) -> Result<BlockRun<T>> {
    transformer_block_run(
        x,
        block,
        &LayerExec::Sbp {
            mask: Rc::new(mask.clone()),
            retain: true,
        },
    )
}

/// Gradients of `sum(y * dy)` for a stand-alone block: `[dx, dparams...]`.
pub fn transformer_block_grads<T: Scalar>(
    x: &Tensor<T>,
    block: &TransformerBlock<T>,
    exec: &LayerExec,
    dy: &Tensor<T>,
    oracle_mask: Option<&SampleMask>,
) -> Result<Vec<Tensor<T>>> {
    block.check(x)?;
    let mut tape = Tape::new();
    let leaves = block.leaves(&mut tape, x);
    let region: Rc<dyn Region<T>> = Rc::new(BlockRegion { heads: block.heads });
    let out = run_layer(&mut tape, 0, exec, region, &leaves, true)?;
    let layers = BTreeSet::from([0]);
    let gate = oracle_mask.map(|mask| crate::autograd::GateMask {
        mask,
        layers: &layers,
    });
    let g = tape.backward_seeded(out, dy.clone(), gate, &[])?;
    leaves.iter().map(|&l| g.wrt(l).cloned()).collect()
}

/// Clip dimensions `[C, T, H, W]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VideoShape {
    pub channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl VideoShape {
    pub fn dims(&self) -> Vec<usize> {
        vec![self.channels, self.frames, self.height, self.width]
    }

    pub fn numel(&self) -> usize {
        self.channels * self.frames * self.height * self.width
    }

    fn check(&self, video: &Tensor<impl Scalar>) -> Result<()> {
        if video.shape() != self.dims().as_slice() {
            return Err(Error::Shape {
                op: "video",
                lhs: video.shape().to_vec(),
                rhs: self.dims(),
            });
        }
        Ok(())
    }
}

/// Splits a `[C, T, H, W]` clip into `T * gh * gw` patch tokens, ordered by
/// frame, then patch row, then patch column. Each token lists its values by
/// channel, then pixel row, then pixel column.
pub fn patchify<T: Scalar>(video: &Tensor<T>, grid: (usize, usize)) -> Result<Tensor<T>> {
    let [c, t, h, w] = *video.shape() else {
        return Err(Error::Shape {
            op: "patchify",
            lhs: video.shape().to_vec(),
            rhs: vec![0; 4],
        });
    };
    let (gh, gw) = grid;
    if gh == 0 || gw == 0 || h % gh != 0 || w % gw != 0 {
        return Err(Error::Shape {
            op: "patchify",
            lhs: vec![h, w],
            rhs: vec![gh, gw],
        });
    }
    let (ph, pw) = (h / gh, w / gw);
    let d = video.data();
    let mut out = Vec::with_capacity(video.numel());
    for ti in 0..t {
        for gy in 0..gh {
            for gx in 0..gw {
                for ci in 0..c {
                    for y in 0..ph {
                        let base = ((ci * t + ti) * h + gy * ph + y) * w + gx * pw;
                        out.extend_from_slice(&d[base..base + pw]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![t * gh * gw, c * ph * pw], out)
}

/// Splits a `[C, T, H, W]` clip into `T / k` chunks of `k` consecutive
/// frames, one row per chunk (channel, frame, row, column order).
pub fn chunkify<T: Scalar>(video: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let [c, t, h, w] = *video.shape() else {
        return Err(Error::Shape {
            op: "chunkify",
            lhs: video.shape().to_vec(),
            rhs: vec![0; 4],
        });
    };
    if k == 0 || t % k != 0 {
        return Err(Error::Shape {
            op: "chunkify",
            lhs: vec![t],
            rhs: vec![k],
        });
    }
    let n = t / k;
    let frame = h * w;
    let d = video.data();
    let mut out = Vec::with_capacity(video.numel());
    for i in 0..n {
        for ci in 0..c {
            let base = (ci * t + i * k) * frame;
            out.extend_from_slice(&d[base..base + k * frame]);
        }
    }
    Tensor::new(vec![n, c * k * frame], out)
}

/// How gradients are produced in a training step.
#[derive(Debug, Clone, Copy)]
pub enum GradMode<'a> {
    /// Record each slot as the plan says.
    Plan(&'a ExecPlan),
    /// Dense recording; gradient rows outside `mask` are zeroed at the gates
    /// of the listed slots.
    Oracle {
        mask: &'a SampleMask,
        layers: &'a BTreeSet<usize>,
    },
    /// Dense recording on the kept nodes only (mask over the model's nodes).
    FrameDropout(&'a SampleMask),
}

#[derive(Debug, Clone, Copy)]
pub struct StepOptions<'a> {
    pub mode: GradMode<'a>,
    /// Also return the gradient of each clip's node inputs.
    pub input_grad: bool,
    /// Report per-frame gradient magnitudes at this slot's output.
    pub probe_slot: Option<usize>,
}

impl<'a> StepOptions<'a> {
    pub fn new(mode: GradMode<'a>) -> Self {
        Self {
            mode,
            input_grad: false,
            probe_slot: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput<T: Scalar> {
    /// Mean loss over the batch.
    pub loss: f64,
    pub correct: usize,
    /// Gradient of the mean loss, in [`ParamStore`] order.
    pub grads: Vec<Tensor<T>>,
    /// Charges of all clips of the batch together.
    pub memory: MemoryStats,
    pub ops: OpCounter,
    /// Per clip, when requested.
    pub input_grads: Vec<Tensor<T>>,
    /// Per-frame (or per-chunk) gradient magnitude summed over the batch.
    pub probe: Option<Vec<f64>>,
}

/// What a model recorded for one clip.
#[derive(Debug, Clone)]
pub struct Recorded {
    pub input: Var,
    pub logits: Var,
    pub slot_outputs: Vec<Var>,
}

/// A video classifier built from layer slots.
pub trait VideoModel<T: Scalar>: LayeredModel {
    fn params(&self) -> &ParamStore<T>;

    fn params_mut(&mut self) -> &mut ParamStore<T>;

    fn video_shape(&self) -> VideoShape;

    fn classes(&self) -> usize;

    /// Node-axis input of a clip: one row per token or chunk.
    fn nodes(&self, video: &Tensor<T>) -> Result<Tensor<T>>;

    /// One row per frame position of the mask grid, used by the
    /// diverse-feature sampler.
    fn node_features(&self, video: &Tensor<T>) -> Result<Tensor<T>>;

    /// Records one clip. `keep` restricts the model to a subset of its nodes
    /// (frame dropout).
    fn record(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        nodes: Var,
        plan: &ExecPlan,
        keep: Option<&[usize]>,
    ) -> Result<Recorded>;
}

fn register<T: Scalar>(tape: &mut Tape<T>, shared: &[Rc<Tensor<T>>]) -> Vec<Var> {
    shared.iter().map(|p| tape.param_rc(p.clone())).collect()
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// One training step over `batch` (clip, label) pairs.
pub fn train_step<T: Scalar, M: VideoModel<T>>(
    model: &M,
    batch: &[(&Tensor<T>, usize)],
    opts: StepOptions<'_>,
) -> Result<StepOutput<T>> {
    if batch.is_empty() {
        return Err(config("empty batch"));
    }
    let shared = model.params().shared();
    let dense = ExecPlan::dense(model.num_slots());
    let (plan, gate, keep) = match opts.mode {
        GradMode::Plan(p) => (p, None, None),
        GradMode::Oracle { mask, layers } => (&dense, Some(crate::autograd::GateMask { mask, layers }), None),
        GradMode::FrameDropout(m) => (&dense, None, Some(m.kept())),
    };
    let scale = T::of(1.0 / batch.len() as f64);
    let grid = model.node_grid();
    let mut out = StepOutput {
        loss: 0.0,
        correct: 0,
        grads: model
            .params()
            .iter()
            .map(|p| Tensor::zeros(p.value.shape().to_vec()))
            .collect(),
        memory: MemoryStats::default(),
        ops: OpCounter::default(),
        input_grads: Vec::new(),
        probe: opts.probe_slot.map(|_| vec![0.0; grid.frames]),
    };
    for &(video, label) in batch {
        let mut tape = Tape::new();
        let params = register(&mut tape, &shared);
        let nodes = model.nodes(video)?;
        let nodes = tape.input(nodes, opts.input_grad);
        let rec = model.record(&mut tape, &params, nodes, plan, keep)?;
        if argmax(tape.value(rec.logits).data()) == label {
            out.correct += 1;
        }
        let ce = tape.cross_entropy(rec.logits, &[label])?;
        out.loss += tape.value(ce).data()[0].as_f64() / batch.len() as f64;
        let loss = tape.scale(ce, scale)?;
        let probe_var = opts.probe_slot.map(|s| rec.slot_outputs[s.min(rec.slot_outputs.len() - 1)]);
        let retain: Vec<Var> = probe_var.into_iter().collect();
        let seed = Tensor::ones(tape.value(loss).shape().to_vec());
        let g = tape.backward_seeded(loss, seed, gate, &retain)?;
        for (acc, &p) in out.grads.iter_mut().zip(&params) {
            acc.add_assign(g.wrt(p)?)?;
        }
        if opts.input_grad {
            out.input_grads.push(g.wrt(nodes)?.clone());
        }
        if let (Some(v), Some(probe)) = (probe_var, out.probe.as_mut()) {
            if let Some(dy) = g.get(v) {
                let per = dy.rows() / grid.frames.max(1);
                for i in 0..dy.rows() {
                    let norm = dy.row(i).iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
                    let frame = keep.map_or(i, |k| k[i]) / per.max(1);
                    if frame < probe.len() {
                        probe[frame] += norm;
                    }
                }
            }
        }
        out.memory.merge(&tape.memory_stats());
        out.ops.merge(tape.op_counter());
    }
    if !out.loss.is_finite() {
        return Err(Error::NonFinite { op: "loss" });
    }
    Ok(out)
}

/// Logits of one clip, without gradient tracking.
pub fn predict<T: Scalar, M: VideoModel<T>>(model: &M, video: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(slot_outputs(model, video)?.pop().expect("logits are always recorded"))
}

/// Output of every layer slot of one clip, followed by the logits.
pub fn slot_outputs<T: Scalar, M: VideoModel<T>>(model: &M, video: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let mut tape = Tape::no_grad();
    let params = register(&mut tape, &model.params().shared());
    let nodes = model.nodes(video)?;
    let nodes = tape.input(nodes, false);
    let plan = ExecPlan::dense(model.num_slots());
    let rec = model.record(&mut tape, &params, nodes, &plan, None)?;
    let mut outs: Vec<Tensor<T>> = rec.slot_outputs.iter().map(|&v| tape.value(v).clone()).collect();
    outs.push(tape.value(rec.logits).clone());
    Ok(outs)
}

/// Mini video transformer: patch embedding, `layers` blocks, mean pooling and
/// a linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerConfig {
    pub video: VideoShape,
    /// Patch grid per frame.
    pub grid: (usize, usize),
    pub heads: usize,
    pub head_dim: usize,
    pub layers: usize,
    pub classes: usize,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let v = self.video;
        if v.channels == 0 || v.frames == 0 || v.height == 0 || v.width == 0 {
            return Err(config("clip dimensions must be positive"));
        }
        let (gh, gw) = self.grid;
        if gh == 0 || gw == 0 || v.height % gh != 0 || v.width % gw != 0 {
            return Err(config(format!(
                "patch grid {gh}x{gw} does not divide {}x{}",
                v.height, v.width
            )));
        }
        if self.heads == 0 || self.head_dim == 0 || self.layers == 0 || self.classes < 2 {
            return Err(config("heads, head_dim and layers must be positive, classes at least 2"));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.video.frames * self.grid.0 * self.grid.1
    }

    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn patch_dim(&self) -> usize {
        self.video.channels * (self.video.height / self.grid.0) * (self.video.width / self.grid.1)
    }

    /// Default boundary: everything below the top three blocks.
    pub fn default_boundary(&self) -> usize {
        self.layers.saturating_sub(3)
    }
}

/// Slots: 0 is the embedding, `i + 1` is block `i`. The head (tagged
/// `layers + 1`) always keeps full backward.
#[derive(Debug, Clone, PartialEq)]
pub struct MiniVideoTransformer<T: Scalar> {
    pub config: TransformerConfig,
    params: ParamStore<T>,
}

impl<T: Scalar> MiniVideoTransformer<T> {
    pub fn new(config: TransformerConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c = config.width();
        let mut params = ParamStore::new();
        params.push("embed.w", 0, weight(config.patch_dim(), c, rng));
        params.push("embed.b", 0, Tensor::zeros(vec![c]));
        params.push("embed.pos", 0, Tensor::randn(vec![config.tokens(), c], 0.5, rng));
        for l in 0..config.layers {
            push_block(&mut params, &format!("block{l}"), l + 1, c, rng);
        }
        params.push("head.w", config.layers + 1, weight(c, config.classes, rng));
        params.push("head.b", config.layers + 1, Tensor::zeros(vec![config.classes]));
        Ok(Self { config, params })
    }

    pub fn head_slot(&self) -> usize {
        self.config.layers + 1
    }
}

impl<T: Scalar> LayeredModel for MiniVideoTransformer<T> {
    fn num_slots(&self) -> usize {
        self.config.layers + 1
    }

    fn wrapped_slots(&self, boundary: usize) -> Result<Vec<usize>> {
        if boundary > self.config.layers {
            return Err(config(format!(
                "boundary {boundary} exceeds the {} blocks",
                self.config.layers
            )));
        }
        Ok(if boundary == 0 { Vec::new() } else { (0..=boundary).collect() })
    }

    fn node_grid(&self) -> NodeGrid {
        NodeGrid {
            frames: self.config.video.frames,
            h: self.config.grid.0,
            w: self.config.grid.1,
        }
    }
}

impl<T: Scalar> VideoModel<T> for MiniVideoTransformer<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn video_shape(&self) -> VideoShape {
        self.config.video
    }

    fn classes(&self) -> usize {
        self.config.classes
    }

    fn nodes(&self, video: &Tensor<T>) -> Result<Tensor<T>> {
        self.config.video.check(video)?;
        patchify(video, self.config.grid)
    }

    fn node_features(&self, video: &Tensor<T>) -> Result<Tensor<T>> {
        let p = self.nodes(video)?;
        let per = self.config.grid.0 * self.config.grid.1;
        p.reshape(vec![self.config.video.frames, per * p.cols()])
    }

    fn record(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        nodes: Var,
        plan: &ExecPlan,
        keep: Option<&[usize]>,
    ) -> Result<Recorded> {
        let heads = self.config.heads;
        let (x, pos) = match keep {
            Some(k) => {
                tape.set_layer(Some(0));
                let x = tape.gather_rows(nodes, k)?;
                (x, tape.gather_rows(params[2], k)?)
            }
            None => (nodes, params[2]),
        };
        let embed: Rc<dyn Region<T>> = Rc::new(EmbedRegion);
        let mut h = run_layer(tape, 0, plan.exec(0), embed, &[x, params[0], params[1], pos], false)?;
        let mut slot_outputs = vec![h];
        let block: Rc<dyn Region<T>> = Rc::new(BlockRegion { heads });
        for l in 0..self.config.layers {
            let base = 3 + l * BLOCK_PARAMS.len();
            let mut inputs = vec![h];
            inputs.extend_from_slice(&params[base..base + BLOCK_PARAMS.len()]);
            h = run_layer(tape, l + 1, plan.exec(l + 1), block.clone(), &inputs, true)?;
            slot_outputs.push(h);
        }
        let head = params.len() - 2;
        let prev = tape.set_layer(Some(self.head_slot()));
        let pooled = tape.mean_rows(h)?;
        let logits = tape.matmul(pooled, params[head])?;
        let logits = tape.add_bias(logits, params[head + 1])?;
        tape.set_layer(prev);
        Ok(Recorded {
            input: nodes,
            logits,
            slot_outputs,
        })
    }
}

/// Spatial-then-temporal model: a per-chunk encoder followed by a temporal
/// transformer block over the chunk features.
#[derive(Debug, Clone, PartialEq)]
pub struct SttConfig {
    pub video: VideoShape,
    /// Frames per chunk.
    pub chunk: usize,
    /// Hidden width of the spatial encoder.
    pub hidden: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub classes: usize,
}

impl SttConfig {
    pub fn validate(&self) -> Result<()> {
        let v = self.video;
        if v.channels == 0 || v.frames == 0 || v.height == 0 || v.width == 0 {
            return Err(config("clip dimensions must be positive"));
        }
        if self.chunk == 0 || v.frames % self.chunk != 0 {
            return Err(Error::Shape {
                op: "stt_chunks",
                lhs: vec![v.frames],
                rhs: vec![self.chunk],
            });
        }
        if self.hidden == 0 || self.heads == 0 || self.head_dim == 0 || self.classes < 2 {
            return Err(config("hidden, heads and head_dim must be positive, classes at least 2"));
        }
        Ok(())
    }

    pub fn chunks(&self) -> usize {
        self.video.frames / self.chunk
    }

    pub fn chunk_dim(&self) -> usize {
        self.video.channels * self.chunk * self.video.height * self.video.width
    }

    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// Slot 0 is the spatial encoder, slot 1 the temporal model and head.
#[derive(Debug, Clone, PartialEq)]
pub struct SttModel<T: Scalar> {
    pub config: SttConfig,
    params: ParamStore<T>,
}

/// Number of spatial-encoder parameters at the front of the store.
pub const STT_SPATIAL_PARAMS: usize = 6;

impl<T: Scalar> SttModel<T> {
    pub fn new(config: SttConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (cd, hid, c) = (config.chunk_dim(), config.hidden, config.width());
        let mut params = ParamStore::new();
        params.push("spatial.ln_g", 0, Tensor::ones(vec![cd]));
        params.push("spatial.ln_b", 0, Tensor::zeros(vec![cd]));
        params.push("spatial.w1", 0, weight(cd, hid, rng));
        params.push("spatial.b1", 0, Tensor::zeros(vec![hid]));
        params.push("spatial.w2", 0, weight(hid, c, rng));
        params.push("spatial.b2", 0, Tensor::zeros(vec![c]));
        params.push("temporal.pos", 1, Tensor::randn(vec![config.chunks(), c], 0.5, rng));
        push_block(&mut params, "temporal", 1, c, rng);
        params.push("head.w", 1, weight(c, config.classes, rng));
        params.push("head.b", 1, Tensor::zeros(vec![config.classes]));
        Ok(Self { config, params })
    }

    /// Spatial features `h` of every chunk of a clip.
    pub fn spatial_features(&self, video: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::no_grad();
        let params = register(&mut tape, &self.params.shared());
        let x = self.nodes(video)?;
        let x = tape.input(x, false);
        let mut inputs = vec![x];
        inputs.extend_from_slice(&params[..STT_SPATIAL_PARAMS]);
        let h = SpatialRegion.record(&mut tape, &inputs, RowSelect::All)?;
        Ok(tape.value(h).clone())
    }

    /// Spatial-encoder parameter gradients of one chunk in isolation, given
    /// the gradient `dh` arriving at its feature row.
    pub fn chunk_param_grads(&self, chunk: &Tensor<T>, dh: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::new();
        let params = register(&mut tape, &self.params.shared()[..STT_SPATIAL_PARAMS]);
        let x = tape.input(chunk.clone(), false);
        let mut inputs = vec![x];
        inputs.extend_from_slice(&params);
        let h = SpatialRegion.record(&mut tape, &inputs, RowSelect::All)?;
        let g = tape.backward_seeded(h, dh.clone(), None, &[])?;
        params.iter().map(|&p| g.wrt(p).cloned()).collect()
    }
}

impl<T: Scalar> LayeredModel for SttModel<T> {
    fn num_slots(&self) -> usize {
        2
    }

    fn wrapped_slots(&self, boundary: usize) -> Result<Vec<usize>> {
        match boundary {
            0 => Ok(Vec::new()),
            1 => Ok(vec![0]),
            b => Err(config(format!(
                "boundary {b} out of range for the spatial-then-temporal model (0 or 1)"
            ))),
        }
    }

    fn node_grid(&self) -> NodeGrid {
        NodeGrid::temporal(self.config.chunks())
    }
}

impl<T: Scalar> VideoModel<T> for SttModel<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn video_shape(&self) -> VideoShape {
        self.config.video
    }

    fn classes(&self) -> usize {
        self.config.classes
    }

    fn nodes(&self, video: &Tensor<T>) -> Result<Tensor<T>> {
        self.config.video.check(video)?;
        chunkify(video, self.config.chunk)
    }

    fn node_features(&self, video: &Tensor<T>) -> Result<Tensor<T>> {
        self.nodes(video)
    }

    fn record(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        nodes: Var,
        plan: &ExecPlan,
        keep: Option<&[usize]>,
    ) -> Result<Recorded> {
        let s = STT_SPATIAL_PARAMS;
        let (x, pos) = match keep {
            Some(k) => {
                tape.set_layer(Some(0));
                let x = tape.gather_rows(nodes, k)?;
                tape.set_layer(Some(1));
                (x, tape.gather_rows(params[s], k)?)
            }
            None => (nodes, params[s]),
        };
        let mut inputs = vec![x];
        inputs.extend_from_slice(&params[..s]);
        let h = run_layer(tape, 0, plan.exec(0), Rc::new(SpatialRegion), &inputs, false)?;
        let mut inputs = vec![h, pos];
        inputs.extend_from_slice(&params[s + 1..s + 1 + BLOCK_PARAMS.len()]);
        let region: Rc<dyn Region<T>> = Rc::new(PosBlockRegion {
            heads: self.config.heads,
        });
        let z = run_layer(tape, 1, plan.exec(1), region, &inputs, true)?;
        let head = params.len() - 2;
        let prev = tape.set_layer(Some(1));
        let pooled = tape.mean_rows(z)?;
        let logits = tape.matmul(pooled, params[head])?;
        let logits = tape.add_bias(logits, params[head + 1])?;
        tape.set_layer(prev);
        Ok(Recorded {
            input: nodes,
            logits,
            slot_outputs: vec![h, z],
        })
    }
}

/// Logits of the spatial-then-temporal model on one clip.
pub fn stt_forward<T: Scalar>(video: &Tensor<T>, model: &SttModel<T>) -> Result<Tensor<T>> {
    predict(model, video)
}

/// A stochastic-backprop step with the whole spatial encoder wrapped.
pub fn stt_sbp_step<T: Scalar>(
    model: &SttModel<T>,
    batch: &[(&Tensor<T>, usize)],
    mask: &SampleMask,
    retain: bool,
) -> Result<StepOutput<T>> {
    let plan = ExecPlan {
        layers: vec![
            LayerExec::Sbp {
                mask: Rc::new(mask.clone()),
                retain,
            },
            LayerExec::Dense,
        ],
    };
    train_step(model, batch, StepOptions::new(GradMode::Plan(&plan)))
}

/// Frame dropout: uniformly sampled frames (or chunks) are kept and the
/// rest are removed before the model, both forward and backward.
pub fn frame_dropout_step<T: Scalar, M: VideoModel<T>>(
    model: &M,
    batch: &[(&Tensor<T>, usize)],
    r: f64,
    rng: &mut Rng,
) -> Result<StepOutput<T>> {
    let grid = model.node_grid();
    let frames = crate::sbp::sample_uniform(grid.frames, r, rng)?;
    let mask = frames.expand(grid.tokens_per_frame());
    train_step(model, batch, StepOptions::new(GradMode::FrameDropout(&mask)))
}
