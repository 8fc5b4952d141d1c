use std::path::{Path, PathBuf};

use chickface::classifier::ClassifierConfig;
use chickface::detection::DetectorConfig;
use chickface::keypoints::KeypointModelConfig;
use chickface::pipeline::CropParams;
use serde::{Deserialize, Serialize};

/// Environment variable consulted when `--config` is absent.
pub const CONFIG_ENV: &str = "PIPELINE_CONFIG";

/// Settings shared by every subcommand. All fields are optional in the JSON
/// file; missing ones take the defaults below.
///
/// ```json
/// {
///   "data_root": "data",
///   "output_root": "out",
///   "detector": { "input_size": 640, "conf_threshold": 0.8, "iou_threshold": 0.5, "model_ref": "blob" },
///   "keypoints": { "input_size": [256, 256], "stride": 4, "sigma": 2.0, "width": 32, "lr": 0.001, "batch_size": 8 },
///   "keypoint_epochs": 30,
///   "classifier": { "backbone": "resnet50", "head_dims": [512, 128, 1], "lr": 1e-5, "epochs": 50 },
///   "crop": { "margin_scale": 1.0, "mask_radius_factor": 0.25 },
///   "folds": 5,
///   "fold_seed": 0,
///   "seed": 0
/// }
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Raw inputs: `raw/`, `labels.csv`, `annotations/`.
    pub data_root: PathBuf,
    /// Everything the stages write.
    pub output_root: PathBuf,
    pub detector: DetectorConfig,
    pub keypoints: KeypointModelConfig,
    pub keypoint_epochs: usize,
    pub classifier: ClassifierConfig,
    pub crop: CropParams,
    pub folds: usize,
    pub fold_seed: u64,
    /// Seed of keypoint training and annotation retraining.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            data_root: "data".into(),
            output_root: "out".into(),
            detector: DetectorConfig::default(),
            keypoints: KeypointModelConfig::default(),
            keypoint_epochs: 30,
            classifier: ClassifierConfig::default(),
            crop: CropParams::default(),
            folds: 5,
            fold_seed: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

impl PipelineConfig {
    /// `explicit`, else the path in `PIPELINE_CONFIG`, else defaults.
    pub fn resolve(explicit: Option<&Path>) -> Result<PipelineConfig, ConfigError> {
        let from_env = std::env::var_os(CONFIG_ENV).filter(|v| !v.is_empty()).map(PathBuf::from);
        match explicit.map(Path::to_path_buf).or(from_env) {
            Some(p) => Self::load(&p),
            None => Ok(PipelineConfig::default()),
        }
    }

    pub fn load(path: &Path) -> Result<PipelineConfig, ConfigError> {
        let bytes = std::fs::read(path).map_err(|e| ConfigError(format!("config {}: {e}", path.display())))?;
        serde_json::from_slice(&bytes).map_err(|e| ConfigError(format!("config {}: {e}", path.display())))
    }

    /// Applies `--seed` to every stochastic stage.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
            self.fold_seed = s;
            self.classifier.seed = s;
        }
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let wrap = |what: &str, e: chickface::Error| ConfigError(format!("{what}: {e}"));
        self.detector.validate().map_err(|e| wrap("detector", e))?;
        self.keypoints.validate().map_err(|e| wrap("keypoints", e))?;
        self.classifier.validate().map_err(|e| wrap("classifier", e))?;
        if self.folds < 2 {
            return Err(ConfigError(format!("folds must be at least 2, got {}", self.folds)));
        }
        if self.keypoint_epochs == 0 {
            return Err(ConfigError("keypoint_epochs must be positive".into()));
        }
        if !(self.crop.margin_scale >= 0.0 && self.crop.margin_scale.is_finite()) {
            return Err(ConfigError(format!("margin_scale must be non-negative, got {}", self.crop.margin_scale)));
        }
        if !(self.crop.mask_radius_factor > 0.0 && self.crop.mask_radius_factor.is_finite()) {
            return Err(ConfigError(format!("mask_radius_factor must be positive, got {}", self.crop.mask_radius_factor)));
        }
        Ok(())
    }

    pub fn require_dir(path: &Path, what: &str) -> Result<(), ConfigError> {
        if path.is_dir() {
            Ok(())
        } else {
            Err(ConfigError(format!("{what} {} does not exist", path.display())))
        }
    }

    pub fn models_dir(&self) -> PathBuf {
        self.output_root.join("models")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.output_root.join("manifest.json")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_example_parses() {
        let src = include_str!("config.rs");
        let start = src.find("/// ```json").unwrap();
        let end = start + src[start..].find("/// ```\n").unwrap();
        let body: String = src[start..end].lines().skip(1).map(|l| l.trim_start().trim_start_matches("///")).collect::<Vec<_>>().join("\n");
        let cfg: PipelineConfig = serde_json::from_str(&body).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg, PipelineConfig::default());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"fold": 3}"#).is_err());
    }

    #[test]
    fn seed_reaches_every_stage() {
        let c = PipelineConfig::default().with_seed(Some(9));
        assert_eq!((c.seed, c.fold_seed, c.classifier.seed), (9, 9, 9));
    }
}
