use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::evalkit::{ReconstructSettings, DEFAULT_TAU};
use crate::pointrender::SplatConfig;
use crate::synthgen::{catalog, DatasetManifest, CATALOG_SIZE};
use crate::{Error, Result};

/// Every tunable of data generation, both training stages and evaluation.
/// Serialized field names are the JSON config keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub stage1_epochs: usize,
    pub stage1_lr: f64,
    pub stage2_epochs: usize,
    pub stage2_lr: f64,
    /// Weight of the multi-view consistency term in Stage 1.
    pub lambda_mv: f64,
    /// Shapes per optimizer step.
    pub batch_size: usize,
    pub image_size: usize,
    /// Lattice resolution for point-cloud extraction during training.
    pub grid_res: usize,
    /// Lattice resolution at inference: marching cubes and evaluation clouds.
    pub mesh_res: usize,
    pub threshold: f64,
    pub seed: u64,
    /// Catalog shapes used for the dataset: indices `shape_offset..shape_offset + num_shapes`.
    pub num_shapes: usize,
    pub shape_offset: usize,
    pub n_uniform: usize,
    pub n_surface: usize,
    pub noise_sd: f64,
    /// Desk-scale cap on optimizer steps per stage; `null` trains every epoch.
    pub max_steps: Option<usize>,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Color tolerance for texture precision/recall.
    pub tau: f64,
    pub splat: SplatConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            stage1_epochs: 100,
            stage1_lr: 0.001,
            stage2_epochs: 50,
            stage2_lr: 0.0005,
            lambda_mv: 1.0,
            batch_size: 1,
            image_size: 64,
            grid_res: 32,
            mesh_res: 64,
            threshold: 0.5,
            seed: 0,
            num_shapes: CATALOG_SIZE,
            shape_offset: 0,
            n_uniform: 512,
            n_surface: 1536,
            noise_sd: 0.05,
            max_steps: None,
            checkpoint_every: 0,
            tau: DEFAULT_TAU,
            splat: SplatConfig::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::contract("training config", msg));
        if !(self.stage1_lr > 0.0 && self.stage1_lr.is_finite())
            || !(self.stage2_lr > 0.0 && self.stage2_lr.is_finite())
        {
            return bad("learning rates must be positive".into());
        }
        if self.stage1_epochs == 0 {
            return bad("stage1_epochs must be at least 1".into());
        }
        if !(self.lambda_mv >= 0.0) {
            return bad("lambda_mv must be non-negative".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.image_size < 8 || !self.image_size.is_multiple_of(4) {
            return bad(format!("image_size {} must be a multiple of 4 and at least 8", self.image_size));
        }
        if self.grid_res < 8 || self.mesh_res < 8 {
            return bad("grid_res and mesh_res must be at least 8".into());
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return bad(format!("threshold {} outside [0, 1)", self.threshold));
        }
        if self.num_shapes == 0 || self.shape_offset + self.num_shapes > CATALOG_SIZE {
            return bad(format!(
                "shapes {}..{} exceed the {CATALOG_SIZE}-shape catalog",
                self.shape_offset,
                self.shape_offset + self.num_shapes
            ));
        }
        if self.n_uniform == 0 || self.n_surface == 0 {
            return bad("n_uniform and n_surface must be positive".into());
        }
        if !(self.noise_sd >= 0.0) || !(self.tau >= 0.0) {
            return bad("noise_sd and tau must be non-negative".into());
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be at least 1 when set".into());
        }
        self.splat.validate()
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::format(path, e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// Applies `key=value`. Nested keys use dots (`splat.sigma_px`). The value is
    /// read as JSON, falling back to a plain string.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut root = serde_json::to_value(&*self).expect("config serializes");
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| Error::contract("config override", format!("unknown key `{key}`")))?;
        }
        *slot = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
        *self = serde_json::from_value(root)
            .map_err(|e| Error::contract("config override", format!("`{key}={value}`: {e}")))?;
        Ok(())
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            seed: self.seed,
            image_size: self.image_size,
            n_uniform: self.n_uniform,
            n_surface: self.n_surface,
            noise_sd: self.noise_sd,
            splat: self.splat,
            shapes: catalog().into_iter().skip(self.shape_offset).take(self.num_shapes).collect(),
        }
    }

    /// Settings for point-cloud reconstruction at inference resolution.
    pub fn reconstruct_settings(&self) -> ReconstructSettings {
        ReconstructSettings { grid_res: self.mesh_res, threshold: self.threshold, splat: self.splat }
    }
}
