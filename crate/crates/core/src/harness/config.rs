use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::select::Criterion;
use super::HarnessError;
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Supervise with other cameras of the same capture.
    #[default]
    Mvt,
    /// Supervise with other times of the same camera.
    Mot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Input frames per target (T).
    pub inputs: usize,
    pub selection: Criterion,
    pub rays_per_batch: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    /// Feature volume and distance grid voxel size, meters.
    pub voxel_size: f64,
    /// Surface-guided sampling threshold, meters.
    pub threshold: f64,
    /// Required; missing seeds are rejected by [`TrainConfig::validate`].
    pub seed: Option<u64>,
    /// Pixels added around the projected body box when drawing rays.
    pub bbox_dilation: usize,
    /// Iterations per logged loss window.
    pub log_window: usize,
    /// Write a checkpoint every this many iterations (0 = only at the end).
    pub checkpoint_every: usize,
    /// Capture directories to train on.
    pub data: Vec<PathBuf>,
    /// Final checkpoint path; periodic ones get an iteration suffix.
    pub output: Option<PathBuf>,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Mvt,
            inputs: 8,
            selection: Criterion::Evenly,
            rays_per_batch: 256,
            iterations: 2000,
            learning_rate: 1e-4,
            voxel_size: 0.02,
            threshold: 0.05,
            seed: None,
            bbox_dilation: 2,
            log_window: 100,
            checkpoint_every: 0,
            data: Vec::new(),
            output: None,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Loads a config file; relative data/output paths resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for d in &mut cfg.data {
            if d.is_relative() {
                *d = base.join(&*d);
            }
        }
        if let Some(o) = &mut cfg.output {
            if o.is_relative() {
                *o = base.join(&*o);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn seed(&self) -> Result<u64, HarnessError> {
        self.seed
            .ok_or_else(|| HarnessError::Config("seed is mandatory".into()))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.seed()?;
        let bad = |m: &str| Err(HarnessError::Config(m.into()));
        if self.inputs == 0 {
            return bad("inputs (T) must be at least 1");
        }
        if !(self.threshold > 0.0) {
            return bad("threshold must be positive");
        }
        if !(self.voxel_size > 0.0) {
            return bad("voxel_size must be positive");
        }
        if self.rays_per_batch == 0 {
            return bad("rays_per_batch must be at least 1");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.log_window == 0 {
            return bad("log_window must be at least 1");
        }
        Ok(())
    }

    /// Model configuration with the shared voxel size and threshold applied.
    pub fn model_config(&self) -> ModelConfig {
        let mut m = self.model.clone();
        m.volume.voxel_size = self.voxel_size;
        m.grid_voxel = self.voxel_size;
        m.threshold = self.threshold;
        m
    }
}
