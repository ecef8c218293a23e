//! Cost predictors for stochastic backprop and representation-similarity
//! diagnostics.

use crate::error::{config, Error, Result};
use crate::scalar::Scalar;
use crate::stats::{MemoryStats, OpCounter};
use crate::tensor::Tensor;

fn check_ratio(r: f64) -> Result<()> {
    if r > 0.0 && r <= 1.0 {
        Ok(())
    } else {
        Err(config(format!("keep-ratio must be in (0, 1], got {r}")))
    }
}

/// Symbols of the cost formulas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModelInput {
    pub h: usize,
    pub d: usize,
    pub n: usize,
    pub r: f64,
    pub m_s: f64,
    pub m_c: f64,
}

impl CostModelInput {
    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.d == 0 || self.n == 0 {
            return Err(config("h, d and n must be positive"));
        }
        if !(self.m_s > 0.0 && self.m_c > 0.0) {
            return Err(config("M_s and M_c must be positive"));
        }
        check_ratio(self.r)
    }

    pub fn transformer_ratio(&self) -> Result<f64> {
        self.validate()?;
        predict_space_ratio_transformer(self.d, self.n, self.r)
    }

    pub fn stt_ratio(&self) -> Result<f64> {
        self.validate()?;
        predict_space_ratio_stt(self.m_s, self.m_c, self.r)
    }
}

/// Cached-element ratio of a transformer block under stochastic backprop:
/// `(r(11d/n + 2) + 4d/n) / ((11d/n + 2) + 4d/n)`.
pub fn predict_space_ratio_transformer(d: usize, n: usize, r: f64) -> Result<f64> {
    if d == 0 || n == 0 {
        return Err(config("d and n must be at least 1"));
    }
    check_ratio(r)?;
    let q = d as f64 / n as f64;
    let sampled = 11.0 * q + 2.0;
    Ok((r * sampled + 4.0 * q) / (sampled + 4.0 * q))
}

/// Cached-element ratio of a spatial-then-temporal model whose spatial part
/// (charge `m_s`) is fully wrapped: `(r m_s + m_c) / (m_s + m_c)`.
pub fn predict_space_ratio_stt(m_s: f64, m_c: f64, r: f64) -> Result<f64> {
    if !(m_s > 0.0) || !(m_c >= 0.0) {
        return Err(config(format!(
            "charges must satisfy M_s > 0 and M_c >= 0, got {m_s} and {m_c}"
        )));
    }
    check_ratio(r)?;
    Ok((r * m_s + m_c) / (m_s + m_c))
}

/// Time ratio with equal forward and backward cost: `(1 + 2r) / 2`.
pub fn predict_time_ratio(r: f64) -> Result<f64> {
    check_ratio(r)?;
    Ok((1.0 + 2.0 * r) / 2.0)
}

/// Cached elements of one block: `15hdn + 2hn^2` scaled to the sampled
/// `k` of `n` tokens as `4hdn + 11hdk + 2hnk`.
pub fn predict_block_charge(h: usize, d: usize, n: usize, k: usize) -> u64 {
    let (h, d, n, k) = (h as u64, d as u64, n as u64, k as u64);
    4 * h * d * n + 11 * h * d * k + 2 * h * n * k
}

fn centered<T: Scalar>(x: &Tensor<T>) -> Vec<f64> {
    let (m, c) = (x.rows(), x.cols());
    let mut out = x.to_f64_vec();
    for j in 0..c {
        let mean = (0..m).map(|i| out[i * c + j]).sum::<f64>() / m as f64;
        for i in 0..m {
            out[i * c + j] -= mean;
        }
    }
    out
}

/// Frobenius norm squared of `aᵀ b` for row-major `a [m x p]`, `b [m x q]`.
fn cross_fro2(a: &[f64], p: usize, b: &[f64], q: usize, m: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..p {
        for j in 0..q {
            let s: f64 = (0..m).map(|r| a[r * p + i] * b[r * q + j]).sum();
            total += s * s;
        }
    }
    total
}

/// Linear CKA of two representations of the same `m` examples.
///
/// Columns are centred first. A representation without variance has no
/// defined similarity; the value is reported as 0 and a warning is logged.
pub fn cka_linear<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    if x.rank() != 2 || y.rank() != 2 || x.rows() != y.rows() {
        return Err(Error::Shape {
            op: "cka_linear",
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    let m = x.rows();
    if m < 2 {
        return Err(config("cka_linear needs at least two examples"));
    }
    let (p, q) = (x.cols(), y.cols());
    let xc = centered(x);
    let yc = centered(y);
    let xx = cross_fro2(&xc, p, &xc, p, m).sqrt();
    let yy = cross_fro2(&yc, q, &yc, q, m).sqrt();
    if xx == 0.0 || yy == 0.0 {
        log::warn!("cka_linear: zero-variance representation, similarity reported as 0");
        return Ok(0.0);
    }
    let xy = cross_fro2(&xc, p, &yc, q, m);
    Ok((xy / (xx * yy)).clamp(0.0, 1.0))
}

/// Pairwise cosine similarity of per-frame vectors `[T x c]`.
///
/// A pair involving a zero vector has similarity 0; the diagonal is 1.
pub fn frame_redundancy<T: Scalar>(activations: &Tensor<T>) -> Result<Tensor<f64>> {
    if activations.rank() != 2 {
        return Err(Error::Shape {
            op: "frame_redundancy",
            lhs: activations.shape().to_vec(),
            rhs: vec![0, 0],
        });
    }
    let t = activations.rows();
    if t < 2 {
        return Err(config("frame_redundancy needs at least two frames"));
    }
    let rows: Vec<Vec<f64>> = (0..t)
        .map(|i| activations.row(i).iter().map(|v| v.as_f64()).collect())
        .collect();
    let norms: Vec<f64> = rows
        .iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut out = vec![0.0; t * t];
    for i in 0..t {
        out[i * t + i] = 1.0;
        for j in i + 1..t {
            let c = if norms[i] == 0.0 || norms[j] == 0.0 {
                0.0
            } else {
                let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0)
            };
            out[i * t + j] = c;
            out[j * t + i] = c;
        }
    }
    Tensor::new(vec![t, t], out)
}

/// Mean of the off-diagonal entries of a square matrix.
pub fn mean_off_diagonal(m: &Tensor<f64>) -> f64 {
    let t = m.rows();
    if t < 2 {
        return 0.0;
    }
    let total: f64 = (0..t)
        .flat_map(|i| (0..t).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| m.at(i, j))
        .sum();
    total / (t * (t - 1)) as f64
}

/// Per-layer similarity results.
#[derive(Debug, Clone, PartialEq)]
pub enum SimilarityReport {
    /// CKA between two models, one value per layer.
    Cka(Vec<f64>),
    /// Frame-pair cosine matrices, one per layer.
    Redundancy(Vec<Tensor<f64>>),
}

impl SimilarityReport {
    pub fn validate(&self) -> Result<()> {
        match self {
            SimilarityReport::Cka(v) => {
                if let Some(bad) = v.iter().find(|c| !(0.0..=1.0).contains(*c)) {
                    return Err(Error::Contract(format!("CKA value {bad} outside [0, 1]")));
                }
            }
            SimilarityReport::Redundancy(ms) => {
                for m in ms {
                    let t = m.rows();
                    for i in 0..t {
                        if (m.at(i, i) - 1.0).abs() > 1e-12 {
                            return Err(Error::Contract("cosine diagonal is not 1".into()));
                        }
                        for j in 0..t {
                            if m.at(i, j) != m.at(j, i) {
                                return Err(Error::Contract("cosine matrix is not symmetric".into()));
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Per-layer summary: the CKA value, or the mean off-diagonal cosine.
    pub fn summary(&self) -> Vec<f64> {
        match self {
            SimilarityReport::Cka(v) => v.clone(),
            SimilarityReport::Redundancy(ms) => ms.iter().map(mean_off_diagonal).collect(),
        }
    }
}

/// Accounting of one measured run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunStats {
    /// Identifies the model and batch; both sides of a comparison must agree.
    pub fingerprint: String,
    pub memory: MemoryStats,
    pub ops: OpCounter,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasuredRatios {
    /// Cached elements, wrapped over full.
    pub space: f64,
    /// Mean of the forward and backward op ratios, which weighs both phases
    /// equally.
    pub time: f64,
    pub forward: f64,
    pub backward: f64,
    /// Ratio of all elementary ops.
    pub total_ops: f64,
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        if a == 0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        a as f64 / b as f64
    }
}

/// Space and time ratios of `run` relative to `full`.
pub fn measure_ratios(full: &RunStats, run: &RunStats) -> Result<MeasuredRatios> {
    if full.fingerprint != run.fingerprint {
        return Err(Error::Contract(format!(
            "runs measured on different workloads: `{}` vs `{}`",
            full.fingerprint, run.fingerprint
        )));
    }
    let forward = ratio(run.ops.forward_elementary_ops, full.ops.forward_elementary_ops);
    let backward = ratio(run.ops.backward_elementary_ops, full.ops.backward_elementary_ops);
    Ok(MeasuredRatios {
        space: ratio(
            run.memory.cached_elements_total,
            full.memory.cached_elements_total,
        ),
        time: 0.5 * (forward + backward),
        forward,
        backward,
        total_ops: ratio(run.ops.total(), full.ops.total()),
    })
}

/// `|measured - predicted| / predicted`.
pub fn relative_deviation(measured: f64, predicted: f64) -> f64 {
    (measured - predicted).abs() / predicted.abs()
}
