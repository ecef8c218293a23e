//! Training runs and their records.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sbp_core::analysis::RunStats;
use sbp_core::models::{
    predict, train_step, GradMode, MiniVideoTransformer, StepOptions, StepOutput, SttModel,
    VideoModel,
};
use sbp_core::sbp::{apply_sbp_to_model, sample_uniform, ExecPlan, LayerExec, LayeredModel, SamplerKind, StepSampler};
use sbp_core::tensor::Tensor;
use sbp_core::{Error as CoreError, MemoryStats, OpCounter, Rng};

use crate::config::{ExperimentConfig, Mode, ModelFamily};
use crate::data::{gen_synthetic_dataset, Dataset, DatasetSpec, Sample};
use crate::error::{io_err, HarnessError, Result};

const SHUFFLE_STREAM: u64 = 0x5f1;
const DROPOUT_STREAM: u64 = 0xfd0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub mean_step_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    /// Layer slot; empty for operations outside any layer.
    pub layer: Option<usize>,
    pub cached_elements: u64,
    pub forward_ops: u64,
    pub backward_ops: u64,
}

/// Everything a run reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub family: ModelFamily,
    pub mode: Mode,
    /// 1 for modes that keep every node.
    pub keep_ratio: f64,
    pub sampler: String,
    pub boundary: usize,
    /// Per-head width and node count, for the cost formulas.
    pub head_dim: usize,
    pub tokens: usize,
    pub seed: u64,
    pub config_hash: String,
    pub dataset_hash: String,
    /// Identifies the audit workload (model shape, data and batch).
    pub fingerprint: String,
    pub epochs: Vec<EpochRecord>,
    pub test_accuracy: f64,
    pub final_train_loss: f64,
    /// Audit step: one batch of the first training clips after training.
    pub cached_elements_total: u64,
    pub forward_ops: u64,
    pub backward_ops: u64,
    pub layers: Vec<LayerRecord>,
    pub mean_step_ms: f64,
    /// Set when the run stopped early.
    pub aborted: Option<String>,
}

impl RunRecord {
    pub fn memory(&self) -> MemoryStats {
        let mut m = MemoryStats::default();
        for l in &self.layers {
            m.charge(l.layer, l.cached_elements);
        }
        m
    }

    pub fn ops(&self) -> OpCounter {
        let mut o = OpCounter::default();
        for l in &self.layers {
            o.add_forward(l.layer, l.forward_ops);
            o.add_backward(l.layer, l.backward_ops);
        }
        o
    }

    pub fn stats(&self) -> RunStats {
        RunStats {
            fingerprint: self.fingerprint.clone(),
            memory: self.memory(),
            ops: self.ops(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// A freshly initialised or trained model of either family.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel {
    Stt(SttModel<f64>),
    Transformer(MiniVideoTransformer<f64>),
}

impl AnyModel {
    /// Initial weights depend on the experiment seed only, so every mode
    /// starts from the same point.
    pub fn init(cfg: &ExperimentConfig) -> Result<Self> {
        let mut rng = Rng::new(cfg.seed);
        let classes = cfg.data.classes;
        Ok(match cfg.model.family {
            ModelFamily::Stt => AnyModel::Stt(SttModel::new(cfg.model.stt(classes), &mut rng)?),
            ModelFamily::MiniTransformer => {
                AnyModel::Transformer(MiniVideoTransformer::new(cfg.model.transformer(classes), &mut rng)?)
            }
        })
    }
}

/// Applies `f` to the concrete model.
#[macro_export]
macro_rules! with_model {
    ($model:expr, $m:ident => $body:expr) => {
        match $model {
            $crate::train::AnyModel::Stt($m) => $body,
            $crate::train::AnyModel::Transformer($m) => $body,
        }
    };
}

fn sha(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn fingerprint(cfg: &ExperimentConfig, dataset_hash: &str) -> Result<String> {
    let model = serde_json::to_string(&cfg.model)?;
    Ok(sha(&format!(
        "{model}|{}|{dataset_hash}|{}",
        cfg.data.classes, cfg.batch_size
    )))
}

/// Slots that get the spatial step size: the spatial encoder of the
/// spatial-then-temporal model.
fn spatial_slot(family: ModelFamily, slot: usize) -> bool {
    family == ModelFamily::Stt && slot == 0
}

/// Per-step driver of one training mode.
pub struct Stepper {
    mode: Mode,
    keep_ratio: f64,
    sampler: Option<StepSampler>,
    dropout_rng: Rng,
    checkpoint: ExecPlan,
    probe_slot: Option<usize>,
}

impl Stepper {
    pub fn new<M: LayeredModel>(cfg: &ExperimentConfig, model: &M) -> Result<Self> {
        let wrapped = model.wrapped_slots(cfg.boundary())?;
        let mut checkpoint = ExecPlan::dense(model.num_slots());
        if cfg.mode == Mode::Checkpoint {
            for &s in &wrapped {
                checkpoint.layers[s] = LayerExec::Checkpoint;
            }
        }
        let sampler = if cfg.mode.is_sbp() {
            Some(StepSampler::new(cfg.sbp_config()?)?)
        } else {
            None
        };
        let probe_slot = match &sampler {
            Some(s) if s.config().sampler == SamplerKind::DiverseGrad => wrapped.last().copied(),
            _ => None,
        };
        Ok(Self {
            mode: cfg.mode,
            keep_ratio: cfg.sbp.keep_ratio,
            sampler,
            dropout_rng: Rng::with_stream(cfg.seed, DROPOUT_STREAM),
            checkpoint,
            probe_slot,
        })
    }

    /// One forward/backward pass on `batch` under this mode.
    pub fn step<M: VideoModel<f64>>(&mut self, model: &M, batch: &[(&Tensor<f64>, usize)]) -> Result<StepOutput<f64>> {
        let out = match self.mode {
            Mode::E2e => {
                let plan = ExecPlan::dense(model.num_slots());
                train_step(model, batch, StepOptions::new(GradMode::Plan(&plan)))?
            }
            Mode::Checkpoint => train_step(model, batch, StepOptions::new(GradMode::Plan(&self.checkpoint)))?,
            Mode::FrameDropout => {
                let grid = model.node_grid();
                let frames = sample_uniform(grid.frames, self.keep_ratio, &mut self.dropout_rng)?;
                let mask = frames.expand(grid.tokens_per_frame());
                train_step(model, batch, StepOptions::new(GradMode::FrameDropout(&mask)))?
            }
            Mode::Sbp | Mode::SbpCheckpoint => {
                let sampler = self.sampler.as_mut().expect("sbp modes own a sampler");
                let features = match sampler.config().sampler {
                    SamplerKind::DiverseFeature => Some(batch_features(model, batch)?),
                    _ => None,
                };
                let plan = apply_sbp_to_model(model, sampler, features.as_ref(), self.mode == Mode::SbpCheckpoint)?;
                let mut opts = StepOptions::new(GradMode::Plan(&plan));
                opts.probe_slot = self.probe_slot;
                let out = train_step(model, batch, opts)?;
                if let Some(p) = &out.probe {
                    sampler.observe_grad(p.clone());
                }
                out
            }
        };
        Ok(out)
    }
}

/// Mean of the per-frame node features over the batch.
fn batch_features<M: VideoModel<f64>>(model: &M, batch: &[(&Tensor<f64>, usize)]) -> Result<Tensor<f64>> {
    let mut acc: Option<Tensor<f64>> = None;
    for &(v, _) in batch {
        let f = model.node_features(v)?;
        match acc.as_mut() {
            Some(a) => a.add_assign(&f)?,
            None => acc = Some(f),
        }
    }
    let acc = acc.expect("batch is not empty");
    Ok(acc.scale(1.0 / batch.len() as f64)?)
}

/// SGD with momentum.
struct Sgd {
    velocity: Vec<Tensor<f64>>,
}

impl Sgd {
    fn new<M: VideoModel<f64>>(model: &M) -> Self {
        Self {
            velocity: model
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.value.shape().to_vec()))
                .collect(),
        }
    }

    fn apply<M: VideoModel<f64>>(&mut self, cfg: &ExperimentConfig, model: &mut M, grads: &[Tensor<f64>], factor: f64) {
        let clip = cfg.grad_clip.map_or(1.0, |c| {
            let norm = grads.iter().map(|g| g.sum_sq()).sum::<f64>().sqrt();
            if norm > c {
                c / norm
            } else {
                1.0
            }
        });
        for ((p, v), g) in model.params_mut().iter_mut().zip(&mut self.velocity).zip(grads) {
            let lr = if spatial_slot(cfg.model.family, p.slot) {
                cfg.lr * cfg.spatial_lr_multiplier
            } else {
                cfg.lr
            } * factor;
            for ((w, vel), &gi) in p.value.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vel = cfg.momentum * *vel + clip * gi;
                *w -= lr * *vel;
            }
        }
    }
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Fraction of `samples` classified correctly.
pub fn evaluate<M: VideoModel<f64>>(model: &M, samples: &[Sample]) -> Result<f64> {
    let mut correct = 0;
    for s in samples {
        if argmax(predict(model, &s.video)?.data()) == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

fn layer_records(memory: &MemoryStats, ops: &OpCounter) -> Vec<LayerRecord> {
    let tags: BTreeSet<_> = memory
        .cached_elements_per_layer
        .keys()
        .chain(ops.per_layer.keys())
        .copied()
        .collect();
    tags.into_iter()
        .map(|layer| {
            let o = ops.per_layer.get(&layer).copied().unwrap_or_default();
            LayerRecord {
                layer,
                cached_elements: memory.layer(layer),
                forward_ops: o.forward,
                backward_ops: o.backward,
            }
        })
        .collect()
}

/// Trains `model` in place and returns its record.
pub fn train<M: VideoModel<f64>>(cfg: &ExperimentConfig, ds: &Dataset, model: &mut M) -> Result<RunRecord> {
    cfg.validate()?;
    let dataset_hash = ds.hash();
    let mut stepper = Stepper::new(cfg, model)?;
    let mut sgd = Sgd::new(model);
    let mut shuffle = Rng::with_stream(cfg.seed, SHUFFLE_STREAM);
    let mut record = RunRecord {
        family: cfg.model.family,
        mode: cfg.mode,
        keep_ratio: if cfg.mode.uses_keep_ratio() { cfg.sbp.keep_ratio } else { 1.0 },
        sampler: if cfg.mode.is_sbp() { cfg.sbp.sampler.clone() } else { String::new() },
        boundary: cfg.boundary(),
        head_dim: cfg.model.head_dim,
        tokens: model.node_grid().len(),
        seed: cfg.seed,
        config_hash: cfg.hash(),
        dataset_hash: dataset_hash.clone(),
        fingerprint: fingerprint(cfg, &dataset_hash)?,
        epochs: Vec::new(),
        test_accuracy: 0.0,
        final_train_loss: f64::NAN,
        cached_elements_total: 0,
        forward_ops: 0,
        backward_ops: 0,
        layers: Vec::new(),
        mean_step_ms: 0.0,
        aborted: None,
    };
    let mut order: Vec<usize> = (0..ds.train.len()).collect();
    let mut step_ms_total = 0.0;
    let mut steps = 0usize;
    let total_steps = cfg.epochs * ds.train.len().div_ceil(cfg.batch_size);
    'epochs: for epoch in 0..cfg.epochs {
        shuffle.shuffle(&mut order);
        let (mut loss, mut correct, mut seen, mut ms) = (0.0, 0usize, 0usize, 0.0);
        let mut epoch_steps = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<(&Tensor<f64>, usize)> = idx.iter().map(|&i| (&ds.train[i].video, ds.train[i].label)).collect();
            let start = Instant::now();
            let out = match stepper.step(model, &batch) {
                Ok(out) => out,
                Err(HarnessError::Core(CoreError::NonFinite { op })) => {
                    record.aborted = Some(format!(
                        "non-finite {op} at epoch {epoch}, step {epoch_steps}"
                    ));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            sgd.apply(cfg, model, &out.grads, cfg.lr_schedule.factor(steps + epoch_steps, total_steps));
            ms += start.elapsed().as_secs_f64() * 1e3;
            epoch_steps += 1;
            loss += out.loss * batch.len() as f64;
            correct += out.correct;
            seen += batch.len();
        }
        step_ms_total += ms;
        steps += epoch_steps;
        let rec = EpochRecord {
            epoch,
            train_loss: loss / seen as f64,
            train_accuracy: correct as f64 / seen as f64,
            test_accuracy: evaluate(model, &ds.test)?,
            mean_step_ms: ms / epoch_steps.max(1) as f64,
        };
        log_epoch(&rec);
        record.final_train_loss = rec.train_loss;
        record.test_accuracy = rec.test_accuracy;
        record.epochs.push(rec);
    }
    record.mean_step_ms = step_ms_total / steps.max(1) as f64;
    if record.aborted.is_none() {
        let n = cfg.batch_size.min(ds.train.len());
        let batch: Vec<(&Tensor<f64>, usize)> = ds.train[..n].iter().map(|s| (&s.video, s.label)).collect();
        let audit = stepper.step(model, &batch)?;
        record.cached_elements_total = audit.memory.cached_elements_total;
        record.forward_ops = audit.ops.forward_elementary_ops;
        record.backward_ops = audit.ops.backward_elementary_ops;
        record.layers = layer_records(&audit.memory, &audit.ops);
    }
    Ok(record)
}

fn log_epoch(rec: &EpochRecord) {
    if std::env::var_os("SBP_VERBOSE").is_some() {
        eprintln!(
            "epoch {} loss {:.4} train {:.3} test {:.3}",
            rec.epoch, rec.train_loss, rec.train_accuracy, rec.test_accuracy
        );
    }
}

/// Generates the dataset, trains, and writes the record when the
/// configuration names an output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunRecord> {
    let ds = gen_synthetic_dataset(&DatasetSpec::from_config(cfg))?;
    let (record, _) = run_on(cfg, &ds)?;
    Ok(record)
}

/// Trains a fresh model on `ds`, returning the record and the trained model.
pub fn run_on(cfg: &ExperimentConfig, ds: &Dataset) -> Result<(RunRecord, AnyModel)> {
    let mut model = AnyModel::init(cfg)?;
    let record = with_model!(&mut model, m => train(cfg, ds, m))?;
    if let Some(dir) = &cfg.output {
        write_run(dir, cfg, &record)?;
    }
    Ok((record, model))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let f = std::fs::File::create(path).map_err(io_err(path))?;
    Ok(csv::Writer::from_writer(f))
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    mode: &'a str,
    keep_ratio: f64,
    sampler: &'a str,
    boundary: usize,
    seed: u64,
    test_accuracy: f64,
    final_train_loss: f64,
    cached_elements_total: u64,
    forward_ops: u64,
    backward_ops: u64,
    mean_step_ms: f64,
    config_hash: &'a str,
    dataset_hash: &'a str,
    status: &'a str,
}

/// Writes `config.json`, `record.json`, `epochs.csv`, `layers.csv` and
/// `summary.csv` into `dir`.
pub fn write_run(dir: &Path, cfg: &ExperimentConfig, record: &RunRecord) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_json()?).map_err(io_err(&path))?;
    let path = dir.join("record.json");
    std::fs::write(&path, serde_json::to_string_pretty(record)?).map_err(io_err(&path))?;

    let mut w = csv_writer(&dir.join("epochs.csv"))?;
    for e in &record.epochs {
        w.serialize(e)?;
    }
    if record.epochs.is_empty() {
        w.write_record(["epoch", "train_loss", "train_accuracy", "test_accuracy", "mean_step_ms"])?;
    }
    w.flush().map_err(io_err(dir))?;

    let mut w = csv_writer(&dir.join("layers.csv"))?;
    w.write_record(["layer", "cached_elements", "forward_ops", "backward_ops"])?;
    for l in &record.layers {
        w.write_record([
            l.layer.map_or(String::new(), |v| v.to_string()),
            l.cached_elements.to_string(),
            l.forward_ops.to_string(),
            l.backward_ops.to_string(),
        ])?;
    }
    w.flush().map_err(io_err(dir))?;

    let mut w = csv_writer(&dir.join("summary.csv"))?;
    w.serialize(SummaryRow {
        mode: record.mode.name(),
        keep_ratio: record.keep_ratio,
        sampler: &record.sampler,
        boundary: record.boundary,
        seed: record.seed,
        test_accuracy: record.test_accuracy,
        final_train_loss: record.final_train_loss,
        cached_elements_total: record.cached_elements_total,
        forward_ops: record.forward_ops,
        backward_ops: record.backward_ops,
        mean_step_ms: record.mean_step_ms,
        config_hash: &record.config_hash,
        dataset_hash: &record.dataset_hash,
        status: record.aborted.as_deref().unwrap_or("ok"),
    })?;
    w.flush().map_err(io_err(dir))?;
    Ok(())
}

/// Memory and op counts of one step of the configured mode, next to the
/// end-to-end step on the same batch, before any training.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryAudit {
    pub e2e: RunStats,
    pub run: RunStats,
}

pub fn audit_memory(cfg: &ExperimentConfig) -> Result<MemoryAudit> {
    cfg.validate()?;
    let ds = gen_synthetic_dataset(&DatasetSpec::from_config(cfg))?;
    let fp = fingerprint(cfg, &ds.hash())?;
    let n = cfg.batch_size.min(ds.train.len());
    let batch: Vec<(&Tensor<f64>, usize)> = ds.train[..n].iter().map(|s| (&s.video, s.label)).collect();
    let model = AnyModel::init(cfg)?;
    let mut e2e_cfg = cfg.clone();
    e2e_cfg.mode = Mode::E2e;
    let stats = |c: &ExperimentConfig| -> Result<RunStats> {
        with_model!(&model, m => {
            let out = Stepper::new(c, m)?.step(m, &batch)?;
            Ok(RunStats {
                fingerprint: fp.clone(),
                memory: out.memory,
                ops: out.ops,
            })
        })
    };
    Ok(MemoryAudit {
        e2e: stats(&e2e_cfg)?,
        run: stats(cfg)?,
    })
}

/// Largest relative gradient error of one stochastic-backprop step against
/// the masked-gradient oracle on the same mask.
#[derive(Debug, Clone, PartialEq)]
pub struct GradAudit {
    pub max_rel_error: f64,
    pub wrapped: Vec<usize>,
    pub kept: usize,
    pub nodes: usize,
}

pub fn audit_grad(cfg: &ExperimentConfig) -> Result<GradAudit> {
    cfg.validate()?;
    if !cfg.mode.is_sbp() {
        return Err(HarnessError::Config("audit-grad needs mode sbp or sbp+checkpoint".into()));
    }
    if cfg.sbp.independent_per_layer {
        return Err(HarnessError::Config("audit-grad needs one mask shared by all layers".into()));
    }
    let ds = gen_synthetic_dataset(&DatasetSpec::from_config(cfg))?;
    let n = cfg.batch_size.min(ds.train.len());
    let batch: Vec<(&Tensor<f64>, usize)> = ds.train[..n].iter().map(|s| (&s.video, s.label)).collect();
    let model = AnyModel::init(cfg)?;
    with_model!(&model, m => {
        let mut sampler = StepSampler::new(cfg.sbp_config()?)?;
        let features = match sampler.config().sampler {
            SamplerKind::DiverseFeature => Some(batch_features(m, &batch)?),
            _ => None,
        };
        let plan = apply_sbp_to_model(m, &mut sampler, features.as_ref(), cfg.mode == Mode::SbpCheckpoint)?;
        let sbp = train_step(m, &batch, StepOptions::new(GradMode::Plan(&plan)))?;
        let wrapped = plan.wrapped();
        let layers: BTreeSet<usize> = wrapped.iter().copied().collect();
        let full = sbp_core::SampleMask::full(m.node_grid().len());
        let mask = plan.shared_mask().map_or(&full, |m| m.as_ref());
        let oracle = train_step(m, &batch, StepOptions::new(GradMode::Oracle { mask, layers: &layers }))?;
        let mut worst = 0.0f64;
        for (a, b) in sbp.grads.iter().zip(&oracle.grads) {
            let scale = b.max_abs().max(1e-300);
            worst = worst.max(a.max_abs_diff(b)? / scale);
        }
        Ok(GradAudit {
            max_rel_error: worst,
            wrapped,
            kept: mask.len(),
            nodes: mask.total(),
        })
    })
}
