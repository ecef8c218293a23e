//! Experiment configuration, loaded from JSON. Unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sbp_core::models::{SttConfig, TransformerConfig, VideoShape};
use sbp_core::sbp::{SamplerKind, SbpConfig};

use crate::error::{io_err, HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    Stt,
    MiniTransformer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "e2e")]
    E2e,
    #[serde(rename = "sbp")]
    Sbp,
    #[serde(rename = "frame_dropout")]
    FrameDropout,
    #[serde(rename = "checkpoint")]
    Checkpoint,
    #[serde(rename = "sbp+checkpoint")]
    SbpCheckpoint,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::E2e,
        Mode::Sbp,
        Mode::FrameDropout,
        Mode::Checkpoint,
        Mode::SbpCheckpoint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::E2e => "e2e",
            Mode::Sbp => "sbp",
            Mode::FrameDropout => "frame_dropout",
            Mode::Checkpoint => "checkpoint",
            Mode::SbpCheckpoint => "sbp+checkpoint",
        }
    }

    /// Modes whose results depend on the keep-ratio.
    pub fn uses_keep_ratio(self) -> bool {
        matches!(self, Mode::Sbp | Mode::SbpCheckpoint | Mode::FrameDropout)
    }

    pub fn is_sbp(self) -> bool {
        matches!(self, Mode::Sbp | Mode::SbpCheckpoint)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| HarnessError::Config(format!("unknown mode `{s}`")))
    }
}

fn one() -> usize {
    1
}

fn four() -> usize {
    4
}

fn hidden_default() -> usize {
    32
}

fn unit_grid() -> [usize; 2] {
    [1, 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: ModelFamily,
    #[serde(default = "one")]
    pub channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Patch grid per frame (mini transformer).
    #[serde(default = "unit_grid")]
    pub grid: [usize; 2],
    pub heads: usize,
    pub head_dim: usize,
    /// Transformer blocks (mini transformer).
    #[serde(default = "four")]
    pub layers: usize,
    /// Frames per chunk (StT).
    #[serde(default = "one")]
    pub chunk: usize,
    /// Spatial encoder width (StT).
    #[serde(default = "hidden_default")]
    pub hidden: usize,
}

impl ModelConfig {
    pub fn video(&self) -> VideoShape {
        VideoShape {
            channels: self.channels,
            frames: self.frames,
            height: self.height,
            width: self.width,
        }
    }

    pub fn transformer(&self, classes: usize) -> TransformerConfig {
        TransformerConfig {
            video: self.video(),
            grid: (self.grid[0], self.grid[1]),
            heads: self.heads,
            head_dim: self.head_dim,
            layers: self.layers,
            classes,
        }
    }

    pub fn stt(&self, classes: usize) -> SttConfig {
        SttConfig {
            video: self.video(),
            chunk: self.chunk,
            hidden: self.hidden,
            heads: self.heads,
            head_dim: self.head_dim,
            classes,
        }
    }

    /// Boundary used when the configuration does not set one.
    pub fn default_boundary(&self) -> usize {
        match self.family {
            ModelFamily::Stt => 1,
            ModelFamily::MiniTransformer => self.layers.saturating_sub(3),
        }
    }
}

fn scene_default() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: usize,
    pub test: usize,
    pub classes: usize,
    pub noise: f64,
    /// Scale of the per-clip background shared by all frames.
    #[serde(default = "scene_default")]
    pub scene: f64,
    /// Number of distinct motifs; the smallest count whose orderings cover
    /// the classes when unset.
    #[serde(default)]
    pub motifs: Option<usize>,
    /// Dataset seed; the experiment seed when unset.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn keep_ratio_default() -> f64 {
    0.25
}

fn sampler_default() -> String {
    SamplerKind::UniformRandom.name().to_string()
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SbpSection {
    #[serde(default = "keep_ratio_default")]
    pub keep_ratio: f64,
    #[serde(default = "sampler_default")]
    pub sampler: String,
    #[serde(default)]
    pub boundary: Option<usize>,
    #[serde(default = "yes")]
    pub resample_each_step: bool,
    #[serde(default)]
    pub independent_per_layer: bool,
}

impl Default for SbpSection {
    fn default() -> Self {
        Self {
            keep_ratio: keep_ratio_default(),
            sampler: sampler_default(),
            boundary: None,
            resample_each_step: true,
            independent_per_layer: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from `lr` to zero over the run.
    Cosine,
}

impl LrSchedule {
    /// Step-size factor at `step` of `total`.
    pub fn factor(self, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total.max(1) as f64).cos()),
        }
    }
}

fn spatial_multiplier_default() -> f64 {
    0.1
}

fn momentum_default() -> f64 {
    0.9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub sbp: SbpSection,
    pub mode: Mode,
    pub lr: f64,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    /// Step-size multiplier for the spatial part (slots at or below the
    /// boundary).
    #[serde(default = "spatial_multiplier_default")]
    pub spatial_lr_multiplier: f64,
    #[serde(default = "momentum_default")]
    pub momentum: f64,
    /// Global gradient-norm clip; off when unset.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn bad(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn boundary(&self) -> usize {
        self.sbp
            .boundary
            .unwrap_or_else(|| self.model.default_boundary())
    }

    pub fn sampler(&self) -> Result<SamplerKind> {
        Ok(self.sbp.sampler.parse::<SamplerKind>()?)
    }

    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or(self.seed)
    }

    /// Stochastic-backprop settings of this run.
    pub fn sbp_config(&self) -> Result<SbpConfig> {
        let mut cfg = SbpConfig::new(self.sbp.keep_ratio, self.sampler()?, self.boundary(), self.seed)?;
        cfg.resample_each_step = self.sbp.resample_each_step;
        cfg.independent_per_layer = self.sbp.independent_per_layer;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.frames < 4 {
            return Err(bad("model.frames must be at least 4"));
        }
        match m.family {
            ModelFamily::MiniTransformer => m.transformer(self.data.classes).validate()?,
            ModelFamily::Stt => m.stt(self.data.classes).validate()?,
        }
        if self.boundary() > match m.family {
            ModelFamily::Stt => 1,
            ModelFamily::MiniTransformer => m.layers,
        } {
            return Err(bad(format!("boundary {} is out of range", self.boundary())));
        }
        let d = &self.data;
        if d.classes < 2 {
            return Err(bad("data.classes must be at least 2"));
        }
        if d.train == 0 || d.test == 0 {
            return Err(bad("data.train and data.test must be positive"));
        }
        if !(d.noise >= 0.0 && d.noise.is_finite()) || !(d.scene >= 0.0 && d.scene.is_finite()) {
            return Err(bad("data.noise and data.scene must be finite and non-negative"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(bad("lr must be positive"));
        }
        if !(self.spatial_lr_multiplier >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(bad("spatial_lr_multiplier must be >= 0 and momentum in [0, 1)"));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(bad("grad_clip must be positive"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(bad("epochs and batch_size must be positive"));
        }
        if self.mode.uses_keep_ratio() {
            let r = self.sbp.keep_ratio;
            if !(r > 0.0 && r <= 1.0) {
                return Err(bad(format!("sbp.keep_ratio must be in (0, 1], got {r}")));
            }
        }
        if self.mode.is_sbp() {
            self.sbp_config()?;
        } else {
            self.sampler()?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, without the output path.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output = None;
        let text = serde_json::to_string(&c).expect("config serialises");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const SAMPLE: &str = r#"{
        "model": {"family": "mini_transformer", "frames": 8, "height": 4, "width": 4, "heads": 2, "head_dim": 8},
        "data": {"train": 10, "test": 5, "classes": 6, "noise": 0.5},
        "mode": "sbp",
        "lr": 0.05,
        "epochs": 1,
        "batch_size": 4,
        "seed": 3
    }"#;

    #[test]
    fn parses_with_defaults() {
        let c = ExperimentConfig::from_json(SAMPLE).unwrap();
        assert_eq!(c.boundary(), 1);
        assert_eq!(c.spatial_lr_multiplier, 0.1);
        assert_eq!(c.sbp.keep_ratio, 0.25);
        assert_eq!(c.hash(), ExperimentConfig::from_json(SAMPLE).unwrap().hash());
    }

    #[test]
    fn rejects_unknown_keys_and_missing_seed() {
        let extra = SAMPLE.replace("\"seed\": 3", "\"seed\": 3, \"colour\": 1");
        assert!(ExperimentConfig::from_json(&extra).is_err());
        let nested = SAMPLE.replace("\"noise\": 0.5", "\"noise\": 0.5, \"x\": 2");
        assert!(ExperimentConfig::from_json(&nested).is_err());
        let no_seed = SAMPLE.replace(",\n        \"seed\": 3", "");
        assert!(ExperimentConfig::from_json(&no_seed).is_err());
    }

    #[test]
    fn mode_specific_validation() {
        let c = SAMPLE.replace("\"mode\": \"sbp\"", "\"mode\": \"sbp\", \"sbp\": {\"keep_ratio\": 0.0}");
        assert!(ExperimentConfig::from_json(&c).is_err());
        let c = SAMPLE.replace("\"mode\": \"sbp\"", "\"mode\": \"e2e\", \"sbp\": {\"keep_ratio\": 0.0}");
        assert!(ExperimentConfig::from_json(&c).is_ok());
        let c = SAMPLE.replace(
            "\"mode\": \"sbp\"",
            "\"mode\": \"sbp\", \"sbp\": {\"sampler\": \"checkerboard3d\", \"keep_ratio\": 0.3}",
        );
        assert!(ExperimentConfig::from_json(&c).is_err());
        let c = SAMPLE.replace("\"mode\": \"sbp\"", "\"mode\": \"sbp\", \"sbp\": {\"boundary\": 9}");
        assert!(ExperimentConfig::from_json(&c).is_err());
        assert_eq!("sbp+checkpoint".parse::<Mode>().unwrap(), Mode::SbpCheckpoint);
        assert!("fast".parse::<Mode>().is_err());
    }
}
