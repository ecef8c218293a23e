//! Tape-based reverse-mode differentiation.
//!
//! Execution is eager: [`Tape::record`] computes the output immediately and
//! appends a node that remembers its inputs. Which tensors a node keeps for
//! its backward pass is decided by its [`CachePolicy`]; the tape charges those
//! tensors to a [`MemoryStats`] accountant and counts elementary operations in
//! an [`OpCounter`].
//!
//! Besides primitive ops the tape holds composite nodes that re-execute a
//! [`Region`] during backward. They implement gradient checkpointing and the
//! stochastic-backprop wrapper (see [`crate::sbp`]).

use std::collections::BTreeSet;
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use crate::error::{config, Error, Result};
use crate::mask::SampleMask;
use crate::scalar::Scalar;
use crate::stats::{LayerTag, MemoryStats, OpCounter};
use crate::tensor::{gelu_grad_scalar, row_moments, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeafKind {
    /// Trainable weight; never charged as an activation.
    Param,
    /// Data or an activation fed in from outside the tape.
    Input,
}

/// Primitive operation identifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    Square,
    Relu,
    Gelu,
    AddBias,
    SoftmaxRows,
    LayerNorm,
    AttnScores,
    AttnApply,
    GatherRows,
    Sum,
    MeanRows,
    CrossEntropy,
    Gate,
}

impl OpKind {
    pub const ALL: [OpKind; 18] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Square,
        OpKind::Relu,
        OpKind::Gelu,
        OpKind::AddBias,
        OpKind::SoftmaxRows,
        OpKind::LayerNorm,
        OpKind::AttnScores,
        OpKind::AttnApply,
        OpKind::GatherRows,
        OpKind::Sum,
        OpKind::MeanRows,
        OpKind::CrossEntropy,
        OpKind::Gate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Square => "square",
            OpKind::Relu => "relu",
            OpKind::Gelu => "gelu",
            OpKind::AddBias => "add_bias",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::LayerNorm => "layer_norm",
            OpKind::AttnScores => "attn_scores",
            OpKind::AttnApply => "attn_apply",
            OpKind::GatherRows => "gather_rows",
            OpKind::Sum => "sum",
            OpKind::MeanRows => "mean_rows",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::Gate => "gate",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            OpKind::MatMul
            | OpKind::Add
            | OpKind::Sub
            | OpKind::Mul
            | OpKind::AddBias
            | OpKind::AttnScores
            | OpKind::AttnApply => 2,
            OpKind::LayerNorm => 3,
            _ => 1,
        }
    }

    /// Ops whose output row `i` depends only on input row `i` of the first
    /// input; only these can be wrapped with a sampled cache policy directly.
    pub fn is_row_wise(self) -> bool {
        matches!(
            self,
            OpKind::MatMul
                | OpKind::Scale
                | OpKind::Square
                | OpKind::Relu
                | OpKind::Gelu
                | OpKind::AddBias
                | OpKind::SoftmaxRows
                | OpKind::LayerNorm
                | OpKind::Gate
        )
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| config(format!("unknown op id `{s}`")))
    }
}

/// A primitive operation together with its non-tensor arguments.
#[derive(Debug, Clone, PartialEq)]
pub enum Op<T: Scalar> {
    MatMul,
    Add,
    Sub,
    Mul,
    Scale(T),
    Square,
    Relu,
    Gelu,
    /// `x [m x c] + b [c]`, broadcast over rows.
    AddBias,
    /// Softmax over the last axis.
    SoftmaxRows,
    /// `(x, gamma, beta)`.
    LayerNorm { eps: T },
    /// `(q [nq x h*d], k [nk x h*d]) -> [h x nq x nk]`, scaled by `1/sqrt(d)`.
    AttnScores { heads: usize },
    /// `(p [h x nq x nk], v [nk x h*d]) -> [nq x h*d]`.
    AttnApply,
    GatherRows(Rc<[usize]>),
    Sum,
    MeanRows,
    /// Mean cross-entropy of `logits [b x k]` against the labels.
    CrossEntropy(Rc<[usize]>),
    /// Identity marking a layer boundary; `masked_backward` filters gradient
    /// rows here.
    Gate(usize),
}

impl<T: Scalar> Op<T> {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::MatMul => OpKind::MatMul,
            Op::Add => OpKind::Add,
            Op::Sub => OpKind::Sub,
            Op::Mul => OpKind::Mul,
            Op::Scale(_) => OpKind::Scale,
            Op::Square => OpKind::Square,
            Op::Relu => OpKind::Relu,
            Op::Gelu => OpKind::Gelu,
            Op::AddBias => OpKind::AddBias,
            Op::SoftmaxRows => OpKind::SoftmaxRows,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::AttnScores { .. } => OpKind::AttnScores,
            Op::AttnApply => OpKind::AttnApply,
            Op::GatherRows(_) => OpKind::GatherRows,
            Op::Sum => OpKind::Sum,
            Op::MeanRows => OpKind::MeanRows,
            Op::CrossEntropy(_) => OpKind::CrossEntropy,
            Op::Gate(_) => OpKind::Gate,
        }
    }

    /// Parses an op id, filling arguments with defaults (scale 1, one head,
    /// eps 1e-5, row 0, label 0, gate 0).
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name.parse::<OpKind>()? {
            OpKind::MatMul => Op::MatMul,
            OpKind::Add => Op::Add,
            OpKind::Sub => Op::Sub,
            OpKind::Mul => Op::Mul,
            OpKind::Scale => Op::Scale(T::one()),
            OpKind::Square => Op::Square,
            OpKind::Relu => Op::Relu,
            OpKind::Gelu => Op::Gelu,
            OpKind::AddBias => Op::AddBias,
            OpKind::SoftmaxRows => Op::SoftmaxRows,
            OpKind::LayerNorm => Op::LayerNorm { eps: T::of(1e-5) },
            OpKind::AttnScores => Op::AttnScores { heads: 1 },
            OpKind::AttnApply => Op::AttnApply,
            OpKind::GatherRows => Op::GatherRows(Rc::from(vec![0])),
            OpKind::Sum => Op::Sum,
            OpKind::MeanRows => Op::MeanRows,
            OpKind::CrossEntropy => Op::CrossEntropy(Rc::from(vec![0])),
            OpKind::Gate => Op::Gate(0),
        })
    }

    fn forward(&self, x: &[&Tensor<T>]) -> Result<Tensor<T>> {
        match self {
            Op::MatMul => x[0].matmul(x[1]),
            Op::Add => x[0].add(x[1]),
            Op::Sub => x[0].sub(x[1]),
            Op::Mul => x[0].mul(x[1]),
            Op::Scale(s) => x[0].scale(*s),
            Op::Square => x[0].square(),
            Op::Relu => x[0].relu(),
            Op::Gelu => x[0].gelu(),
            Op::AddBias => x[0].add_row(x[1]),
            Op::SoftmaxRows => x[0].softmax_rows(),
            Op::LayerNorm { eps } => x[0].layer_norm(x[1], x[2], *eps),
            Op::AttnScores { heads } => Tensor::attn_scores(x[0], x[1], *heads),
            Op::AttnApply => Tensor::attn_apply(x[0], x[1]),
            Op::GatherRows(idx) => x[0].gather_rows(idx),
            Op::Sum => Ok(Tensor::scalar(x[0].sum())),
            Op::MeanRows => x[0].mean_rows(),
            Op::CrossEntropy(labels) => cross_entropy(x[0], labels).map(Tensor::scalar),
            Op::Gate(_) => Ok(x[0].clone()),
        }
    }

    /// Which tensors a fully cached node keeps: input positions, and whether
    /// it also keeps its own output.
    fn saves(&self) -> (&'static [usize], bool) {
        match self {
            Op::MatMul | Op::Mul | Op::AttnScores { .. } | Op::AttnApply => (&[0, 1], false),
            Op::Square | Op::Relu | Op::Gelu | Op::CrossEntropy(_) => (&[0], false),
            Op::LayerNorm { .. } => (&[0, 1], false),
            // Pre- and post-softmax weights are both kept.
            Op::SoftmaxRows => (&[0], true),
            _ => (&[], false),
        }
    }

    fn forward_cost(&self, x: &[&Tensor<T>], out: &Tensor<T>) -> u64 {
        match self {
            Op::MatMul => (x[0].rows() * x[0].cols() * x[1].cols()) as u64,
            Op::AttnScores { .. } => (out.numel() / attn_heads(out) * x[0].cols()) as u64,
            Op::AttnApply => (x[0].numel() / attn_heads(x[0]) * x[1].cols()) as u64,
            Op::GatherRows(_) | Op::Gate(_) => 0,
            Op::Sum | Op::MeanRows | Op::CrossEntropy(_) => x[0].numel() as u64,
            _ => out.numel() as u64,
        }
    }

    fn backward_cost_per_input(&self, x: &[&Tensor<T>], out: &Tensor<T>) -> u64 {
        match self {
            Op::GatherRows(_) | Op::Gate(_) => 0,
            _ => self.forward_cost(x, out),
        }
    }
}

fn attn_heads<T: Scalar>(scores: &Tensor<T>) -> usize {
    scores.shape().first().copied().unwrap_or(1).max(1)
}

fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    if logits.rank() != 2 || logits.rows() != labels.len() {
        return Err(Error::Shape {
            op: "cross_entropy",
            lhs: logits.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let k = logits.cols();
    let mut total = T::zero();
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Index { index: y, len: k });
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        total += lse - row[y];
    }
    let loss = total / T::of(labels.len() as f64);
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFinite { op: "cross_entropy" })
    }
}

/// How much of a node's working set is kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub enum CachePolicy {
    /// Keep every tensor the op's backward needs.
    Full,
    /// Keep nothing; the output does not require gradients.
    None,
    /// Stochastic backprop over the listed rows of the first input.
    Sampled(SampleMask),
    /// Keep the inputs only and re-execute the op during backward.
    Recompute,
}

/// Row subset a [`Region`] is asked to produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowSelect<'a> {
    /// Every row of the first input, every output row.
    All,
    /// The first input already holds only these rows (row-wise regions).
    Gathered(&'a [usize]),
    /// The first input holds every row; emit output rows for these queries only.
    Query(&'a [usize]),
}

impl<'a> RowSelect<'a> {
    pub fn rows(&self) -> Option<&'a [usize]> {
        match *self {
            RowSelect::All => None,
            RowSelect::Gathered(r) | RowSelect::Query(r) => Some(r),
        }
    }
}

/// A replayable piece of graph. `inputs[0]` carries the node axis; the other
/// inputs are passed through whole.
pub trait Region<T: Scalar> {
    fn record(&self, tape: &mut Tape<T>, inputs: &[Var], rows: RowSelect<'_>) -> Result<Var>;
}

impl<T: Scalar, F> Region<T> for F
where
    F: Fn(&mut Tape<T>, &[Var], RowSelect<'_>) -> Result<Var>,
{
    fn record(&self, tape: &mut Tape<T>, inputs: &[Var], rows: RowSelect<'_>) -> Result<Var> {
        self(tape, inputs, rows)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum CompositeMode {
    Checkpoint,
    Sbp {
        mask: SampleMask,
        side_full: bool,
        retain: bool,
    },
}

struct Replay<T: Scalar> {
    tape: Tape<T>,
    leaves: Vec<Var>,
    out: Var,
}

enum Stash<T: Scalar> {
    Inputs(Vec<Rc<Tensor<T>>>),
    Retained(Box<Replay<T>>),
}

struct Composite<T: Scalar> {
    region: Rc<dyn Region<T>>,
    mode: CompositeMode,
    rows: usize,
    kinds: Vec<LeafKind>,
    requires: Vec<bool>,
    stash: Stash<T>,
    charge: u64,
}

impl<T: Scalar> Composite<T> {
    fn select(&self) -> RowSelect<'_> {
        match &self.mode {
            CompositeMode::Checkpoint => RowSelect::All,
            CompositeMode::Sbp {
                mask, side_full, ..
            } => {
                if *side_full {
                    RowSelect::Query(mask.kept())
                } else {
                    RowSelect::Gathered(mask.kept())
                }
            }
        }
    }

    fn replay(&self, cached: &[Rc<Tensor<T>>], layer: LayerTag) -> Result<Replay<T>> {
        let mut tape = Tape::new();
        tape.set_layer(layer);
        let leaves = cached
            .iter()
            .zip(&self.kinds)
            .zip(&self.requires)
            .map(|((v, &kind), &req)| tape.leaf_rc(v.clone(), kind, req))
            .collect::<Vec<_>>();
        let out = self.region.record(&mut tape, &leaves, self.select())?;
        Ok(Replay { tape, leaves, out })
    }

    fn backward(
        &mut self,
        dy: &Tensor<T>,
        layer: LayerTag,
        counter: &mut OpCounter,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let dy_rows = match &self.mode {
            CompositeMode::Checkpoint => dy.clone(),
            CompositeMode::Sbp { mask, .. } => dy.gather_rows(mask.kept())?,
        };
        let mut fresh;
        let replay = match &mut self.stash {
            Stash::Retained(r) => r.as_mut(),
            Stash::Inputs(cached) => {
                let cached = cached.clone();
                fresh = self.replay(&cached, layer)?;
                counter.add_forward(layer, fresh.tape.ops.forward_elementary_ops);
                &mut fresh
            }
        };
        let before = replay.tape.ops.backward_elementary_ops;
        let grads = replay.tape.backward_seeded(replay.out, dy_rows, None, &[])?;
        counter.add_backward(layer, replay.tape.ops.backward_elementary_ops - before);
        let mut out: Vec<Option<Tensor<T>>> = replay
            .leaves
            .iter()
            .zip(&self.requires)
            .map(|(&l, &req)| if req { grads.get(l).cloned() } else { None })
            .collect();
        if let Some(Some(dx)) = out.first_mut().map(Option::take) {
            let dx = match self.select() {
                RowSelect::All => dx,
                RowSelect::Gathered(idx) => dx.scatter_rows(idx, self.rows)?,
                RowSelect::Query(idx) => dx.keep_rows(idx)?,
            };
            out[0] = Some(dx);
        }
        Ok(out)
    }
}

enum NodeKind<T: Scalar> {
    Leaf(LeafKind),
    Prim(Op<T>),
    Composite(Box<Composite<T>>),
    /// Value produced without gradient tracking.
    Detached,
}

struct Node<T: Scalar> {
    value: Rc<Tensor<T>>,
    kind: NodeKind<T>,
    inputs: Vec<Var>,
    requires_grad: bool,
    layer: LayerTag,
    /// Root storage when this node's value aliases another node's.
    view_of: Option<Var>,
    /// Layer of the first node that saved this value for backward.
    saved_by: Option<LayerTag>,
}

/// Gradients from one backward pass, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or a contract error if none was produced.
    pub fn wrt(&self, v: Var) -> Result<&Tensor<T>> {
        self.get(v)
            .ok_or_else(|| Error::Contract(format!("no gradient recorded for node {}", v.0)))
    }
}

/// Row mask applied at [`Op::Gate`] nodes of the listed layers.
#[derive(Debug, Clone, Copy)]
pub struct GateMask<'a> {
    pub mask: &'a SampleMask,
    pub layers: &'a BTreeSet<usize>,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    layer: LayerTag,
    ops: OpCounter,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            layer: None,
            ops: OpCounter::default(),
        }
    }

    /// A tape on which every record behaves as [`CachePolicy::None`].
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Sets the layer subsequent records are attributed to; returns the old one.
    pub fn set_layer(&mut self, layer: LayerTag) -> LayerTag {
        std::mem::replace(&mut self.layer, layer)
    }

    pub fn layer(&self) -> LayerTag {
        self.layer
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf_rc(Rc::new(value), LeafKind::Param, true)
    }

    pub fn param_rc(&mut self, value: Rc<Tensor<T>>) -> Var {
        self.leaf_rc(value, LeafKind::Param, true)
    }

    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.leaf_rc(Rc::new(value), LeafKind::Input, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.input(value, false)
    }

    fn leaf_rc(&mut self, value: Rc<Tensor<T>>, kind: LeafKind, requires_grad: bool) -> Var {
        self.push(Node {
            value,
            kind: NodeKind::Leaf(kind),
            inputs: Vec::new(),
            requires_grad: requires_grad && self.grad_enabled,
            layer: self.layer,
            view_of: None,
            saved_by: None,
        })
    }

    fn push(&mut self, node: Node<T>) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        self.nodes.get(v.0).ok_or(Error::Index {
            index: v.0,
            len: self.nodes.len(),
        })
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn value_rc(&self, v: Var) -> Rc<Tensor<T>> {
        self.nodes[v.0].value.clone()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn is_param(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].kind, NodeKind::Leaf(LeafKind::Param))
    }

    pub fn op_counter(&self) -> &OpCounter {
        &self.ops
    }

    fn root(&self, v: Var) -> Var {
        self.nodes[v.0].view_of.unwrap_or(v)
    }

    fn mark_saved(&mut self, v: Var) {
        let layer = self.layer;
        let node = &mut self.nodes[v.0];
        if node.saved_by.is_none() {
            node.saved_by = Some(layer);
        }
    }

    /// Appends `op` applied to `inputs`, computing its value eagerly.
    pub fn record(&mut self, op: Op<T>, inputs: &[Var], policy: CachePolicy) -> Result<Var> {
        let kind = op.kind();
        if inputs.len() != kind.arity() {
            return Err(config(format!(
                "{kind} takes {} inputs, got {}",
                kind.arity(),
                inputs.len()
            )));
        }
        for &v in inputs {
            self.node(v)?;
        }
        match policy {
            CachePolicy::Full | CachePolicy::None => {
                self.record_prim(op, inputs, policy == CachePolicy::Full)
            }
            CachePolicy::Sampled(mask) => {
                if !kind.is_row_wise() {
                    return Err(config(format!("{kind} is not row-wise; cannot sample its rows")));
                }
                let region = prim_region(op);
                self.sbp(region, inputs, &mask, false, true)
            }
            CachePolicy::Recompute => self.checkpoint(prim_region(op), inputs),
        }
    }

    fn record_prim(&mut self, op: Op<T>, inputs: &[Var], cache: bool) -> Result<Var> {
        let values: Vec<Rc<Tensor<T>>> = inputs.iter().map(|&v| self.value_rc(v)).collect();
        let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
        let out = op.forward(&refs)?;
        self.ops.add_forward(self.layer, op.forward_cost(&refs, &out));
        let tracked =
            cache && self.grad_enabled && inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        let view_of = match &op {
            Op::GatherRows(_) | Op::Gate(_) => Some(self.root(inputs[0])),
            _ => None,
        };
        let value = match &op {
            Op::Gate(_) => values[0].clone(),
            _ => Rc::new(out),
        };
        let (saved_inputs, saves_output) = op.saves();
        let var = self.push(Node {
            value,
            kind: if tracked {
                NodeKind::Prim(op)
            } else {
                NodeKind::Detached
            },
            inputs: inputs.to_vec(),
            requires_grad: tracked,
            layer: self.layer,
            view_of,
            saved_by: None,
        });
        if tracked {
            for &i in saved_inputs {
                self.mark_saved(inputs[i]);
            }
            if saves_output {
                self.mark_saved(var);
            }
        }
        Ok(var)
    }

    /// Records `region` as one node that keeps only its inputs and re-executes
    /// during backward.
    pub fn checkpoint(&mut self, region: Rc<dyn Region<T>>, inputs: &[Var]) -> Result<Var> {
        self.record_composite(region, inputs, CompositeMode::Checkpoint)
    }

    /// Records `region` under stochastic backprop over `mask` (rows of
    /// `inputs[0]`).
    ///
    /// The output is computed exactly over all rows. Gradients flow only
    /// through the masked rows: the upstream gradient is restricted to them,
    /// the region is re-executed on the cached rows (or, with `side_full`, on
    /// the full first input while emitting only the masked rows), and the
    /// input gradient is scattered back into zeros. With `retain` the replay
    /// is executed and kept at forward time, so its activations are charged;
    /// otherwise only the cached inputs are kept and the replay happens during
    /// backward.
    pub fn sbp(
        &mut self,
        region: Rc<dyn Region<T>>,
        inputs: &[Var],
        mask: &SampleMask,
        side_full: bool,
        retain: bool,
    ) -> Result<Var> {
        self.record_composite(
            region,
            inputs,
            CompositeMode::Sbp {
                mask: mask.clone(),
                side_full,
                retain,
            },
        )
    }

    fn record_composite(
        &mut self,
        region: Rc<dyn Region<T>>,
        inputs: &[Var],
        mode: CompositeMode,
    ) -> Result<Var> {
        if inputs.is_empty() {
            return Err(config("composite region needs at least one input"));
        }
        for &v in inputs {
            self.node(v)?;
        }
        let values: Vec<Rc<Tensor<T>>> = inputs.iter().map(|&v| self.value_rc(v)).collect();
        let rows = values[0].rows();
        if let CompositeMode::Sbp { mask, .. } = &mode {
            if mask.total() != rows {
                return Err(Error::Index {
                    index: mask.total(),
                    len: rows,
                });
            }
        }
        let layer = self.layer;

        // Exact forward over every row, without gradient tracking.
        let mut plain = Tape::no_grad();
        plain.set_layer(layer);
        let leaves: Vec<Var> = values
            .iter()
            .map(|v| plain.leaf_rc(v.clone(), LeafKind::Input, false))
            .collect();
        let out = region.record(&mut plain, &leaves, RowSelect::All)?;
        let value = plain.value_rc(out);
        self.ops.merge(&plain.ops);

        let requires: Vec<bool> = inputs
            .iter()
            .map(|&v| self.grad_enabled && self.nodes[v.0].requires_grad)
            .collect();
        if !requires.iter().any(|&r| r) {
            return Ok(self.push(Node {
                value,
                kind: NodeKind::Detached,
                inputs: inputs.to_vec(),
                requires_grad: false,
                layer,
                view_of: None,
                saved_by: None,
            }));
        }
        let kinds: Vec<LeafKind> = inputs
            .iter()
            .map(|&v| {
                if self.is_param(v) {
                    LeafKind::Param
                } else {
                    LeafKind::Input
                }
            })
            .collect();
        let mut cached = values.clone();
        if let CompositeMode::Sbp {
            mask,
            side_full: false,
            ..
        } = &mode
        {
            cached[0] = Rc::new(values[0].gather_rows(mask.kept())?);
        }
        let mut composite = Composite {
            region,
            mode,
            rows,
            kinds,
            requires,
            stash: Stash::Inputs(Vec::new()),
            charge: 0,
        };
        let retain = matches!(composite.mode, CompositeMode::Sbp { retain: true, .. });
        if retain {
            let replay = composite.replay(&cached, layer)?;
            self.ops.merge(&replay.tape.ops);
            composite.charge = replay.tape.memory_stats().cached_elements_total;
            composite.stash = Stash::Retained(Box::new(replay));
        } else {
            composite.charge = cached
                .iter()
                .zip(&composite.kinds)
                .filter(|(_, &k)| k == LeafKind::Input)
                .map(|(v, _)| v.numel() as u64)
                .sum();
            composite.stash = Stash::Inputs(cached);
        }
        Ok(self.push(Node {
            value,
            kind: NodeKind::Composite(Box::new(composite)),
            inputs: inputs.to_vec(),
            requires_grad: true,
            layer,
            view_of: None,
            saved_by: None,
        }))
    }

    /// Cached-element charges of everything currently on the tape.
    pub fn memory_stats(&self) -> MemoryStats {
        let mut stats = MemoryStats::default();
        for node in &self.nodes {
            if let Some(layer) = node.saved_by {
                let shared = node
                    .view_of
                    .is_some_and(|base| self.nodes[base.0].saved_by.is_some());
                let is_param = matches!(node.kind, NodeKind::Leaf(LeafKind::Param));
                if !shared && !is_param {
                    stats.charge(layer, node.value.numel() as u64);
                }
            }
            if let NodeKind::Composite(c) = &node.kind {
                stats.charge(node.layer, c.charge);
            }
        }
        stats
    }

    /// Gradients of a scalar `loss` with respect to every leaf that requires
    /// them. Leaves the loss does not depend on get zeros.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        let seed = self.scalar_seed(loss)?;
        self.backward_seeded(loss, seed, None, &[])
    }

    /// Like [`Tape::backward`], additionally keeping the gradients of the
    /// intermediate nodes in `retain`.
    pub fn backward_retaining(&mut self, loss: Var, retain: &[Var]) -> Result<Gradients<T>> {
        let seed = self.scalar_seed(loss)?;
        self.backward_seeded(loss, seed, None, retain)
    }

    /// Dense reference for stochastic backprop: plain backward, except that at
    /// every [`Op::Gate`] of a layer in `layers` the gradient rows outside
    /// `mask` are zeroed.
    pub fn masked_backward(
        &mut self,
        loss: Var,
        mask: &SampleMask,
        layers: &BTreeSet<usize>,
    ) -> Result<Gradients<T>> {
        let seed = self.scalar_seed(loss)?;
        self.backward_seeded(loss, seed, Some(GateMask { mask, layers }), &[])
    }

    fn scalar_seed(&self, loss: Var) -> Result<Tensor<T>> {
        let value = &self.node(loss)?.value;
        if value.numel() != 1 {
            return Err(Error::Contract(format!(
                "loss must be scalar, got shape {:?}",
                value.shape()
            )));
        }
        Ok(Tensor::ones(value.shape().to_vec()))
    }

    /// Reverse sweep from `root`, seeded with `seed` (same shape as its value).
    pub fn backward_seeded(
        &mut self,
        root: Var,
        seed: Tensor<T>,
        gate: Option<GateMask<'_>>,
        retain: &[Var],
    ) -> Result<Gradients<T>> {
        let root_value = &self.node(root)?.value;
        if root_value.shape() != seed.shape() {
            return Err(Error::Shape {
                op: "backward",
                lhs: root_value.shape().to_vec(),
                rhs: seed.shape().to_vec(),
            });
        }
        let mut pending: Vec<Option<Tensor<T>>> = vec![None; root.0 + 1];
        let mut result: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        if self.nodes[root.0].requires_grad {
            pending[root.0] = Some(seed);
        }
        for i in (0..=root.0).rev() {
            let Some(dy) = pending[i].take() else {
                continue;
            };
            if retain.contains(&Var(i)) {
                result[i] = Some(dy.clone());
            }
            let layer = self.nodes[i].layer;
            let input_grads = match &mut self.nodes[i].kind {
                NodeKind::Leaf(_) => {
                    result[i] = Some(dy);
                    continue;
                }
                NodeKind::Detached => continue,
                NodeKind::Composite(c) => c.backward(&dy, layer, &mut self.ops)?,
                NodeKind::Prim(_) => self.prim_backward(i, &dy, gate)?,
            };
            let inputs = self.nodes[i].inputs.clone();
            for (v, g) in inputs.into_iter().zip(input_grads) {
                let Some(g) = g else { continue };
                match &mut pending[v.0] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.kind, NodeKind::Leaf(_)) && node.requires_grad && result[i].is_none() {
                result[i] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads: result })
    }

    fn prim_backward(
        &mut self,
        i: usize,
        dy: &Tensor<T>,
        gate: Option<GateMask<'_>>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let node = &self.nodes[i];
        let NodeKind::Prim(op) = &node.kind else {
            unreachable!("prim_backward on a non-primitive node");
        };
        let xs: Vec<&Tensor<T>> = node.inputs.iter().map(|v| &*self.nodes[v.0].value).collect();
        let needs: Vec<bool> = node
            .inputs
            .iter()
            .map(|v| self.nodes[v.0].requires_grad)
            .collect();
        let out = &*node.value;
        let grads = prim_grads(op, &xs, out, dy, &needs, gate)?;
        let per_input = op.backward_cost_per_input(&xs, out);
        let cost = per_input * grads.iter().filter(|g| g.is_some()).count() as u64;
        let layer = node.layer;
        self.ops.add_backward(layer, cost);
        Ok(grads)
    }

    // Convenience wrappers recording with `CachePolicy::Full`.

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMul, &[a, b], CachePolicy::Full)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add, &[a, b], CachePolicy::Full)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Sub, &[a, b], CachePolicy::Full)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul, &[a, b], CachePolicy::Full)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        self.record(Op::Scale(s), &[a], CachePolicy::Full)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Square, &[a], CachePolicy::Full)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Relu, &[a], CachePolicy::Full)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Gelu, &[a], CachePolicy::Full)
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        self.record(Op::AddBias, &[x, b], CachePolicy::Full)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.record(Op::SoftmaxRows, &[x], CachePolicy::Full)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        self.record(Op::LayerNorm { eps }, &[x, gamma, beta], CachePolicy::Full)
    }

    pub fn attn_scores(&mut self, q: Var, k: Var, heads: usize) -> Result<Var> {
        self.record(Op::AttnScores { heads }, &[q, k], CachePolicy::Full)
    }

    pub fn attn_apply(&mut self, p: Var, v: Var) -> Result<Var> {
        self.record(Op::AttnApply, &[p, v], CachePolicy::Full)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        self.record(Op::GatherRows(Rc::from(idx)), &[x], CachePolicy::Full)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Sum, &[x], CachePolicy::Full)
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        self.record(Op::MeanRows, &[x], CachePolicy::Full)
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.record(Op::CrossEntropy(Rc::from(labels)), &[logits], CachePolicy::Full)
    }

    pub fn gate(&mut self, x: Var, layer: usize) -> Result<Var> {
        self.record(Op::Gate(layer), &[x], CachePolicy::Full)
    }
}

/// Region that records a single primitive op; for [`RowSelect::Query`] the
/// first input is gathered first, which is exact for row-wise ops.
fn prim_region<T: Scalar>(op: Op<T>) -> Rc<dyn Region<T>> {
    Rc::new(move |tape: &mut Tape<T>, inputs: &[Var], rows: RowSelect<'_>| {
        let mut inputs = inputs.to_vec();
        if let RowSelect::Query(idx) = rows {
            inputs[0] = tape.gather_rows(inputs[0], idx)?;
        }
        tape.record(op.clone(), &inputs, CachePolicy::Full)
    })
}

fn prim_grads<T: Scalar>(
    op: &Op<T>,
    x: &[&Tensor<T>],
    out: &Tensor<T>,
    dy: &Tensor<T>,
    needs: &[bool],
    gate: Option<GateMask<'_>>,
) -> Result<Vec<Option<Tensor<T>>>> {
    let need = |i: usize| needs.get(i).copied().unwrap_or(false);
    let zip_map = |a: &Tensor<T>, b: &Tensor<T>, f: &dyn Fn(T, T) -> T| -> Result<Tensor<T>> {
        Tensor::new(
            a.shape().to_vec(),
            a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect(),
        )
    };
    let grads = match op {
        Op::MatMul => vec![
            need(0).then(|| dy.matmul_nt(x[1])).transpose()?,
            need(1).then(|| x[0].matmul_tn(dy)).transpose()?,
        ],
        Op::Add => vec![need(0).then(|| dy.clone()), need(1).then(|| dy.clone())],
        Op::Sub => vec![
            need(0).then(|| dy.clone()),
            need(1).then(|| dy.scale(-T::one())).transpose()?,
        ],
        Op::Mul => vec![
            need(0).then(|| dy.mul(x[1])).transpose()?,
            need(1).then(|| dy.mul(x[0])).transpose()?,
        ],
        Op::Scale(s) => vec![Some(dy.scale(*s)?)],
        Op::Square => vec![Some(zip_map(dy, x[0], &|g, v| g * (v + v))?)],
        Op::Relu => vec![Some(zip_map(dy, x[0], &|g, v| {
            if v > T::zero() {
                g
            } else {
                T::zero()
            }
        })?)],
        Op::Gelu => vec![Some(zip_map(dy, x[0], &|g, v| g * gelu_grad_scalar(v))?)],
        Op::AddBias => vec![need(0).then(|| dy.clone()), need(1).then(|| dy.sum_rows())],
        Op::SoftmaxRows => {
            let c = out.cols();
            let mut dx = vec![T::zero(); out.numel()];
            for ((drow, yrow), grow) in dx.chunks_mut(c).zip(out.data().chunks(c)).zip(dy.data().chunks(c)) {
                let dot: T = yrow.iter().zip(grow).map(|(&y, &g)| y * g).sum();
                for ((d, &y), &g) in drow.iter_mut().zip(yrow).zip(grow) {
                    *d = y * (g - dot);
                }
            }
            vec![Some(Tensor::new(out.shape().to_vec(), dx)?)]
        }
        Op::LayerNorm { eps } => layer_norm_grads(x[0], x[1], dy, *eps, needs)?,
        Op::AttnScores { heads } => attn_scores_grads(x[0], x[1], dy, *heads, needs)?,
        Op::AttnApply => attn_apply_grads(x[0], x[1], dy, needs)?,
        Op::GatherRows(idx) => {
            let c = x[0].cols();
            let mut dx = Tensor::zeros(vec![x[0].rows(), c]);
            for (r, &i) in idx.iter().enumerate() {
                let src = dy.row(r).to_vec();
                for (d, s) in dx.data_mut()[i * c..(i + 1) * c].iter_mut().zip(src) {
                    *d += s;
                }
            }
            vec![Some(dx.reshape(x[0].shape().to_vec())?)]
        }
        Op::Sum => vec![Some(Tensor::full(x[0].shape().to_vec(), dy.data()[0]))],
        Op::MeanRows => {
            let n = T::of(x[0].rows() as f64);
            let row: Vec<T> = dy.data().iter().map(|&g| g / n).collect();
            let data = row.iter().copied().cycle().take(x[0].numel()).collect();
            vec![Some(Tensor::new(x[0].shape().to_vec(), data)?)]
        }
        Op::CrossEntropy(labels) => {
            let probs = x[0].softmax_rows()?;
            let b = T::of(labels.len() as f64);
            let g = dy.data()[0];
            let k = x[0].cols();
            let mut dx = probs.into_data();
            for (i, &y) in labels.iter().enumerate() {
                dx[i * k + y] -= T::one();
            }
            for v in &mut dx {
                *v = *v * g / b;
            }
            vec![Some(Tensor::new(x[0].shape().to_vec(), dx)?)]
        }
        Op::Gate(layer) => match gate {
            Some(GateMask { mask, layers }) if layers.contains(layer) => {
                if mask.total() != dy.rows() {
                    return Err(Error::Index {
                        index: mask.total(),
                        len: dy.rows(),
                    });
                }
                vec![Some(dy.keep_rows(mask.kept())?)]
            }
            _ => vec![Some(dy.clone())],
        },
    };
    Ok(grads
        .into_iter()
        .enumerate()
        .map(|(i, g)| if need(i) { g } else { None })
        .collect())
}

fn layer_norm_grads<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
    eps: T,
    needs: &[bool],
) -> Result<Vec<Option<Tensor<T>>>> {
    let c = x.cols();
    let cf = T::of(c as f64);
    let mut dx = vec![T::zero(); x.numel()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut xhat = vec![T::zero(); c];
    let mut dxhat = vec![T::zero(); c];
    for r in 0..x.rows() {
        let row = x.row(r);
        let grow = dy.row(r);
        let (mean, inv) = row_moments(row, eps);
        for j in 0..c {
            xhat[j] = (row[j] - mean) * inv;
            dxhat[j] = grow[j] * gamma.data()[j];
            dgamma[j] += grow[j] * xhat[j];
            dbeta[j] += grow[j];
        }
        let sum_d: T = dxhat.iter().copied().sum();
        let sum_dx: T = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum();
        for j in 0..c {
            dx[r * c + j] = inv / cf * (cf * dxhat[j] - sum_d - xhat[j] * sum_dx);
        }
    }
    Ok(vec![
        needs[0]
            .then(|| Tensor::new(x.shape().to_vec(), dx))
            .transpose()?,
        needs[1].then(|| Tensor::new(vec![c], dgamma)).transpose()?,
        needs[2].then(|| Tensor::new(vec![c], dbeta)).transpose()?,
    ])
}

fn attn_scores_grads<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    ds: &Tensor<T>,
    heads: usize,
    needs: &[bool],
) -> Result<Vec<Option<Tensor<T>>>> {
    let (nq, width) = (q.rows(), q.cols());
    let nk = k.rows();
    let d = width / heads;
    let scale = T::one() / T::of(d as f64).sqrt();
    let mut dq = vec![T::zero(); q.numel()];
    let mut dk = vec![T::zero(); k.numel()];
    for h in 0..heads {
        for i in 0..nq {
            for j in 0..nk {
                let g = ds.data()[(h * nq + i) * nk + j] * scale;
                if g == T::zero() {
                    continue;
                }
                for t in 0..d {
                    let qi = i * width + h * d + t;
                    let kj = j * width + h * d + t;
                    dq[qi] += g * k.data()[kj];
                    dk[kj] += g * q.data()[qi];
                }
            }
        }
    }
    Ok(vec![
        needs[0].then(|| Tensor::new(q.shape().to_vec(), dq)).transpose()?,
        needs[1].then(|| Tensor::new(k.shape().to_vec(), dk)).transpose()?,
    ])
}

fn attn_apply_grads<T: Scalar>(
    p: &Tensor<T>,
    v: &Tensor<T>,
    dout: &Tensor<T>,
    needs: &[bool],
) -> Result<Vec<Option<Tensor<T>>>> {
    let (heads, nq, nk) = (p.shape()[0], p.shape()[1], p.shape()[2]);
    let width = v.cols();
    let d = width / heads;
    let mut dp = vec![T::zero(); p.numel()];
    let mut dv = vec![T::zero(); v.numel()];
    for h in 0..heads {
        for i in 0..nq {
            let grow = &dout.data()[i * width + h * d..i * width + (h + 1) * d];
            for j in 0..nk {
                let vrow = &v.data()[j * width + h * d..j * width + (h + 1) * d];
                let pij = p.data()[(h * nq + i) * nk + j];
                dp[(h * nq + i) * nk + j] = grow.iter().zip(vrow).map(|(&a, &b)| a * b).sum();
                for (t, &g) in grow.iter().enumerate() {
                    dv[j * width + h * d + t] += pij * g;
                }
            }
        }
    }
    Ok(vec![
        needs[0].then(|| Tensor::new(p.shape().to_vec(), dp)).transpose()?,
        needs[1].then(|| Tensor::new(v.shape().to_vec(), dv)).transpose()?,
    ])
}

/// Gradients of `loss` for every leaf (free-function form of [`Tape::backward`]).
pub fn backward<T: Scalar>(tape: &mut Tape<T>, loss: Var) -> Result<Gradients<T>> {
    tape.backward(loss)
}

/// Free-function form of [`Tape::masked_backward`].
pub fn masked_backward<T: Scalar>(
    tape: &mut Tape<T>,
    loss: Var,
    mask: &SampleMask,
    layers: &BTreeSet<usize>,
) -> Result<Gradients<T>> {
    tape.masked_backward(loss, mask, layers)
}

/// Records a contiguous region as a checkpointed composite node.
pub fn checkpoint_region<T: Scalar>(
    tape: &mut Tape<T>,
    region: Rc<dyn Region<T>>,
    inputs: &[Var],
) -> Result<Var> {
    tape.checkpoint(region, inputs)
}

/// Central differences `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` for every
/// coordinate of `x`.
pub fn finite_difference_grad<T, F>(f: F, x: &Tensor<T>, eps: T) -> Result<Tensor<T>>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Result<T>,
{
    if eps <= T::zero() {
        return Err(config("finite-difference step must be positive"));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (eps + eps));
    }
    Tensor::new(x.shape().to_vec(), grad)
}
