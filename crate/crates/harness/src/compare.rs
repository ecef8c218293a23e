//! Side-by-side comparison of run records.

use std::path::Path;

use serde::{Deserialize, Serialize};

use sbp_core::analysis::{
    measure_ratios, predict_space_ratio_transformer, predict_time_ratio, relative_deviation,
};

use crate::config::{Mode, ModelFamily};
use crate::error::{io_err, HarnessError, Result};
use crate::train::RunRecord;

/// Largest relative deviation from a prediction that still conforms.
pub const CONFORMANCE_TOLERANCE: f64 = 0.10;

/// One row per (mode, keep-ratio) pair; runs sharing a pair (several seeds)
/// are averaged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub mode: String,
    pub keep_ratio: f64,
    pub runs: usize,
    pub test_accuracy: f64,
    /// Accuracy minus the baseline's.
    pub accuracy_delta: f64,
    pub measured_space: f64,
    pub predicted_space: Option<f64>,
    pub space_conforms: Option<bool>,
    pub measured_time: f64,
    pub predicted_time: Option<f64>,
    pub time_conforms: Option<bool>,
}

/// Predicted cached-element ratio of a stochastic-backprop run against the
/// full-cache `baseline`: wrapped tree layers scale by `r`, wrapped
/// attention blocks follow the block formula, the other layers keep their
/// charge.
pub fn predicted_space(baseline: &RunRecord, run: &RunRecord) -> Option<f64> {
    if run.mode == Mode::E2e {
        return Some(1.0);
    }
    if run.mode != Mode::Sbp {
        return None;
    }
    let r = run.keep_ratio;
    let wrapped = |slot: usize| match run.family {
        ModelFamily::Stt => run.boundary == 1 && slot == 0,
        ModelFamily::MiniTransformer => run.boundary > 0 && slot <= run.boundary,
    };
    let block = predict_space_ratio_transformer(run.head_dim, run.tokens, r).ok()?;
    let mut total = 0.0;
    let mut predicted = 0.0;
    for l in &baseline.layers {
        let m = l.cached_elements as f64;
        total += m;
        predicted += match l.layer {
            Some(s) if wrapped(s) && (run.family == ModelFamily::Stt || s == 0) => r * m,
            Some(s) if wrapped(s) => block * m,
            _ => m,
        };
    }
    (total > 0.0).then(|| predicted / total)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Compares `records` against the first end-to-end record (or the first
/// record when there is none) and writes the table to `output` as CSV.
pub fn compare_runs(records: &[RunRecord], output: Option<&Path>) -> Result<Vec<ComparisonRow>> {
    if records.len() < 2 {
        return Err(HarnessError::Contract("comparison needs at least two records".into()));
    }
    if let Some(r) = records.iter().find(|r| r.dataset_hash != records[0].dataset_hash) {
        return Err(HarnessError::Contract(format!(
            "records use different datasets ({} vs {})",
            records[0].dataset_hash, r.dataset_hash
        )));
    }
    if let Some(r) = records.iter().find(|r| r.aborted.is_some()) {
        return Err(HarnessError::Contract(format!(
            "run {} r={} seed {} was aborted",
            r.mode, r.keep_ratio, r.seed
        )));
    }
    let baselines: Vec<&RunRecord> = {
        let e2e: Vec<&RunRecord> = records.iter().filter(|r| r.mode == Mode::E2e).collect();
        if e2e.is_empty() {
            vec![&records[0]]
        } else {
            e2e
        }
    };
    let base = baselines[0];
    let base_acc = mean(baselines.iter().map(|r| r.test_accuracy));

    let mut keys: Vec<(Mode, f64)> = Vec::new();
    for r in records {
        if !keys.iter().any(|&(m, k)| m == r.mode && k == r.keep_ratio) {
            keys.push((r.mode, r.keep_ratio));
        }
    }
    let mut rows = Vec::with_capacity(keys.len());
    for (mode, keep_ratio) in keys {
        let group: Vec<&RunRecord> = records
            .iter()
            .filter(|r| r.mode == mode && r.keep_ratio == keep_ratio)
            .collect();
        let ratios = group
            .iter()
            .map(|r| measure_ratios(&base.stats(), &r.stats()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let measured_space = mean(ratios.iter().map(|m| m.space));
        let measured_time = mean(ratios.iter().map(|m| m.time));
        let predicted_space = predicted_space(base, group[0]);
        let predicted_time = match mode {
            Mode::E2e => Some(1.0),
            Mode::Sbp => predict_time_ratio(keep_ratio).ok(),
            _ => None,
        };
        let conforms = |m: f64, p: Option<f64>| p.map(|p| relative_deviation(m, p) <= CONFORMANCE_TOLERANCE);
        let test_accuracy = mean(group.iter().map(|r| r.test_accuracy));
        rows.push(ComparisonRow {
            mode: mode.name().to_string(),
            keep_ratio,
            runs: group.len(),
            test_accuracy,
            accuracy_delta: test_accuracy - base_acc,
            measured_space,
            predicted_space,
            space_conforms: conforms(measured_space, predicted_space),
            measured_time,
            predicted_time,
            time_conforms: conforms(measured_time, predicted_time),
        });
    }
    if let Some(path) = output {
        let f = std::fs::File::create(path).map_err(io_err(path))?;
        let mut w = csv::Writer::from_writer(f);
        for row in &rows {
            w.serialize(row)?;
        }
        w.flush().map_err(io_err(path))?;
    }
    Ok(rows)
}
