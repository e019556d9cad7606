//! Pipeline configuration: a single JSON-serializable source of truth that
//! commands echo into their output directory for reproducibility.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureParams, PATCH_BACKGROUND, PATCH_REGIONS};
use crate::nn::TrainConfig;
use crate::propagate::PropagationParams;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Superpixel target; the CNN input packing requires exactly 1024.
    pub n_superpixels: usize,
    /// Pseudo-background region count along the image border.
    pub n_background: usize,
    pub sigma_lr: f64,
    pub sigma_gr: f64,
    pub delta_c: f64,
    /// Color bandwidth of the propagation affinity (Lab units).
    pub delta1: f64,
    /// Depth bandwidth of the propagation affinity (normalized units).
    pub delta2: f64,
    pub alpha: f64,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
    pub slic_compactness: f64,
    pub seed: u64,
    pub train: TrainConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            n_superpixels: PATCH_REGIONS,
            n_background: PATCH_BACKGROUND,
            sigma_lr: 0.15,
            sigma_gr: 0.45,
            delta_c: 20.0,
            delta1: 20.0,
            delta2: 0.2,
            alpha: 0.99,
            cg_tol: 1e-8,
            cg_max_iter: 1000,
            slic_compactness: 10.0,
            seed: 0,
            train: TrainConfig::default(),
            dataset: None,
            output: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sigma_lr", self.sigma_lr),
            ("sigma_gr", self.sigma_gr),
            ("delta_c", self.delta_c),
            ("delta1", self.delta1),
            ("delta2", self.delta2),
            ("cg_tol", self.cg_tol),
            ("slic_compactness", self.slic_compactness),
        ] {
            if v <= 0.0 {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!(
                "alpha must lie in (0,1), got {}",
                self.alpha
            )));
        }
        if self.n_superpixels < 2 {
            return Err(Error::Config("n_superpixels must be at least 2".into()));
        }
        if self.n_background == 0 {
            return Err(Error::Config("n_background must be at least 1".into()));
        }
        if self.cg_max_iter == 0 {
            return Err(Error::Config("cg_max_iter must be at least 1".into()));
        }
        self.train.validate()
    }

    /// Validation for the CNN paths (train/infer), where the packing fixes
    /// the superpixel and background counts.
    pub fn validate_for_cnn(&self) -> Result<()> {
        self.validate()?;
        if self.n_superpixels != PATCH_REGIONS {
            return Err(Error::Config(format!(
                "the CNN input packing requires n_superpixels = {PATCH_REGIONS}; \
                 got {} (use the segment command for arbitrary region counts)",
                self.n_superpixels
            )));
        }
        if self.n_background > PATCH_BACKGROUND {
            return Err(Error::Config(format!(
                "n_background must not exceed {PATCH_BACKGROUND} for the CNN packing, got {}",
                self.n_background
            )));
        }
        Ok(())
    }

    pub fn feature_params(&self) -> FeatureParams {
        FeatureParams {
            sigma_lr: self.sigma_lr,
            sigma_gr: self.sigma_gr,
            delta_c: self.delta_c,
        }
    }

    pub fn propagation_params(&self) -> PropagationParams {
        PropagationParams {
            delta1: self.delta1,
            delta2: self.delta2,
            alpha: self.alpha,
            cg_tol: self.cg_tol,
            cg_max_iter: self.cg_max_iter,
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("config serialization: {e}")))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }
}
