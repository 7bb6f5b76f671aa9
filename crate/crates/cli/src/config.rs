//! TOML run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use depth_introspect::decn::CorrectionConfig;
use depth_introspect::dedn::{DednConfig, DistillConfig, HeadMode, DEFAULT_DEPTH_SCALE};
use depth_introspect::depth::{CorruptionModel, SceneConfig};
use depth_introspect::labeling::LabelerConfig;
use depth_introspect::tensor::DEFAULT_LEAKY_SLOPE;
use depth_introspect::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub width: usize,
    pub height: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub regions: usize,
    pub depth_min: f64,
    pub depth_max: f64,
    pub multi_view: bool,
    pub gt_hole_fraction: f64,
    pub corruption: Vec<CorruptionModel>,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let scene = SceneConfig::default();
        Self {
            width: scene.width,
            height: scene.height,
            train_size: 512,
            test_size: 64,
            regions: scene.regions,
            depth_min: scene.depth_min,
            depth_max: scene.depth_max,
            multi_view: scene.multi_view,
            gt_hole_fraction: scene.gt_hole_fraction,
            corruption: scene.corruption,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn scene(&self) -> SceneConfig {
        SceneConfig {
            width: self.width,
            height: self.height,
            regions: self.regions,
            depth_min: self.depth_min,
            depth_max: self.depth_max,
            multi_view: self.multi_view,
            gt_hole_fraction: self.gt_hole_fraction,
            corruption: self.corruption.clone(),
        }
    }

    pub fn n_views(&self) -> usize {
        if self.multi_view {
            2
        } else {
            1
        }
    }
}

/// Architecture knobs; resolution and view count come from the dataset section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub head: HeadMode,
    pub depth_scale: f64,
    pub leaky_slope: f64,
    /// Views the network consumes; defaults to every view the dataset provides.
    pub views: Option<usize>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: vec![8, 16, 32],
            blocks_per_stage: 1,
            head: HeadMode::Softmax,
            depth_scale: DEFAULT_DEPTH_SCALE,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            views: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub labeler: LabelerConfig,
    pub model: ModelConfig,
    pub pretrain: DistillConfig,
    pub training: TrainConfig,
    pub correction: CorrectionConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Sets every seed (dataset, model, pretraining, training) from one value.
    pub fn reseed(&mut self, seed: u64) {
        self.dataset.seed = seed;
        self.model.seed = seed;
        self.pretrain.seed = seed;
        self.training.seed = seed;
    }

    pub fn dedn(&self) -> DednConfig {
        DednConfig {
            width: self.dataset.width,
            height: self.dataset.height,
            channels: self.model.channels.clone(),
            blocks_per_stage: self.model.blocks_per_stage,
            n_views: self.model.views.unwrap_or(self.dataset.n_views()),
            head: self.model.head,
            depth_scale: self.model.depth_scale,
            leaky_slope: self.model.leaky_slope,
        }
    }

    /// Checks every section; nothing runs on an invalid config.
    pub fn validate(&self) -> Result<(), CliError> {
        let d = &self.dataset;
        if d.train_size == 0 || d.test_size == 0 {
            return Err(CliError::Config(
                "dataset.train_size and dataset.test_size must be at least 1".into(),
            ));
        }
        d.scene().validate()?;
        if let Some(v) = self.model.views {
            if v == 0 || v > d.n_views() {
                return Err(CliError::Config(format!(
                    "model.views = {v} but the dataset provides {} view(s)",
                    d.n_views()
                )));
            }
        }
        self.labeler.validate()?;
        self.dedn().validate()?;
        self.pretrain.validate()?;
        self.training.validate()?;
        self.correction.validate()?;
        if self.output.dir.as_os_str().is_empty() {
            return Err(CliError::Config("output.dir must not be empty".into()));
        }
        Ok(())
    }
}
