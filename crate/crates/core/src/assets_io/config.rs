//! Run configuration read from TOML. Unknown keys are rejected; every key
//! is optional and falls back to the default documented in `docs/config.md`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::SynthConfig;
use crate::error::{Error, Result};
use crate::fitter::FitConfig;
use crate::objectives::LossWeights;
use crate::renderer::{Camera, Projection, Style};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraConfig {
    pub width: usize,
    pub height: usize,
    /// Focal length in pixels; defaults to the image width.
    pub focal: Option<f64>,
    /// Distance from the camera to the head centre along +z.
    pub distance: f64,
    pub projection: Projection,
}

impl Default for CameraConfig {
    fn default() -> Self {
        CameraConfig {
            width: 64,
            height: 64,
            focal: None,
            distance: 3.0,
            projection: Projection::Perspective,
        }
    }
}

impl CameraConfig {
    pub fn camera(&self) -> Result<Camera> {
        let mut cam = Camera::looking_at_origin(self.width, self.height, self.distance);
        if let Some(f) = self.focal {
            cam.fx = f;
            cam.fy = f;
        }
        cam.projection = self.projection;
        cam.validate()?;
        Ok(cam)
    }
}

/// Settings of the toy audio-to-motion translator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionConfig {
    /// Phoneme vocabulary size, silence included.
    pub vocab: usize,
    pub timbres: usize,
    pub speakers: usize,
    /// Mouth-opening amplitude of each speaker in generated corpora.
    pub amplitudes: Vec<f64>,
    /// Width of the audio features and the attention block.
    pub dim: usize,
    pub heads: usize,
    /// Hidden width of the motion head.
    pub hidden: usize,
    pub pretrain_steps: usize,
    /// Negatives per contrastive step; clips are cut into `segments + 1` pieces.
    pub segments: usize,
    /// Weight of the content-row anchoring term during pretraining.
    pub content_weight: f64,
    pub steps: usize,
    pub learning_rate: f64,
    /// Frames per clip in generated corpora.
    pub frames: usize,
    pub clips: usize,
}

impl Default for MotionConfig {
    fn default() -> Self {
        MotionConfig {
            vocab: 8,
            timbres: 4,
            speakers: 2,
            amplitudes: vec![1.0, 0.5],
            dim: 32,
            heads: 2,
            hidden: 64,
            pretrain_steps: 600,
            segments: 4,
            content_weight: 1.0,
            steps: 3000,
            learning_rate: 3e-3,
            frames: 50,
            clips: 8,
        }
    }
}

impl MotionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 || self.timbres < 2 || self.speakers == 0 || self.clips == 0 {
            return Err(Error::Config("motion needs vocab >= 2, timbres >= 2, speakers and clips".into()));
        }
        if self.amplitudes.len() != self.speakers || self.amplitudes.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(Error::Config("motion needs one non-negative amplitude per speaker".into()));
        }
        if self.segments == 0 || self.frames < self.segments + 1 {
            return Err(Error::Config("motion frames must cover segments + 1 pieces".into()));
        }
        if !(self.content_weight >= 0.0) {
            return Err(Error::Config("content_weight must be non-negative".into()));
        }
        if self.heads == 0 || self.dim == 0 || self.dim % self.heads != 0 || self.hidden == 0 {
            return Err(Error::Config("motion dim must be a positive multiple of heads".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("motion learning_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub camera: CameraConfig,
    pub style: Style,
    pub weights: LossWeights,
    pub fit: FitConfig,
    pub motion: MotionConfig,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&super::read_text(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.camera.camera()?;
        self.fit_config().validate()?;
        self.motion.validate()?;
        self.synth.validate()?;
        let colors = self.style.palette.iter().chain([&self.style.background, &self.style.semantic_background]);
        for c in colors {
            if c.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Config("colours must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }

    /// Fit settings with the top-level seed, weights and style filled in.
    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            weights: self.weights,
            seed: self.seed,
            style: self.style,
            ..self.fit
        }
    }
}
