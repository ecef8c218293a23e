//! Representation similarity of trained models.

use sbp_core::analysis::{cka_linear, frame_redundancy, SimilarityReport};
use sbp_core::models::{slot_outputs, VideoModel};
use sbp_core::tensor::Tensor;

use crate::error::{HarnessError, Result};

fn frame_means(x: &Tensor<f64>, frames: usize) -> Result<Tensor<f64>> {
    let per = x.rows() / frames;
    if per == 0 || per * frames != x.rows() {
        return Err(HarnessError::Contract(format!(
            "{} rows do not split into {frames} frames",
            x.rows()
        )));
    }
    let c = x.cols();
    let mut out = vec![0.0; frames * c];
    for i in 0..x.rows() {
        for (o, v) in out[(i / per) * c..(i / per + 1) * c].iter_mut().zip(x.row(i)) {
            *o += v / per as f64;
        }
    }
    Ok(Tensor::new(vec![frames, c], out)?)
}

/// Per layer slot: one row per clip holding the clip's mean activation.
pub fn slot_representations<M: VideoModel<f64>>(model: &M, clips: &[&Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
    let mut rows: Vec<Vec<Vec<f64>>> = vec![Vec::new(); model.num_slots()];
    for clip in clips {
        let outs = slot_outputs(model, clip)?;
        for (slot, out) in outs.iter().take(model.num_slots()).enumerate() {
            rows[slot].push(out.mean_rows()?.into_data());
        }
    }
    rows.iter()
        .map(|r| Tensor::from_rows(r).map_err(HarnessError::from))
        .collect()
}

/// Linear CKA between matching layers of two models.
pub fn layer_cka(a: &[Tensor<f64>], b: &[Tensor<f64>]) -> Result<SimilarityReport> {
    let values = a
        .iter()
        .zip(b)
        .map(|(x, y)| cka_linear(x, y))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let report = SimilarityReport::Cka(values);
    report.validate()?;
    Ok(report)
}

/// Mean off-diagonal frame-to-frame cosine similarity of every layer slot,
/// averaged over `clips`.
pub fn layer_redundancy<M: VideoModel<f64>>(model: &M, clips: &[&Tensor<f64>]) -> Result<Vec<f64>> {
    let frames = model.node_grid().frames;
    let mut acc = vec![0.0; model.num_slots()];
    for clip in clips {
        let outs = slot_outputs(model, clip)?;
        let mats = outs
            .iter()
            .take(model.num_slots())
            .map(|o| frame_redundancy(&frame_means(o, frames)?).map_err(HarnessError::from))
            .collect::<Result<Vec<_>>>()?;
        let report = SimilarityReport::Redundancy(mats);
        report.validate()?;
        for (a, v) in acc.iter_mut().zip(report.summary()) {
            *a += v / clips.len() as f64;
        }
    }
    Ok(acc)
}
