//! The JSON run configuration consumed by the command-line trainer.

use std::path::Path;

use serde::{Deserialize, Serialize};

use netshrink::hrnet::HrnetLiteSpec;
use netshrink::prune::{SlimmingConfig, SwdConfig};

use crate::data::SyntheticDatasetSpec;
use crate::error::{Result, TrainError};
use crate::train::{Regularizer, TrainConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerKind {
    #[default]
    None,
    Slimming,
    Swd,
}

/// Everything needed to reproduce one training run. Every section and field
/// is optional and falls back to its default; unknown fields are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub dataset: SyntheticDatasetSpec,
    pub model: HrnetLiteSpec,
    pub regularizer: RegularizerKind,
    pub slimming: SlimmingConfig,
    pub swd: SwdConfig,
    /// Run the full prune-and-retrain pipeline instead of training only.
    pub pipeline: bool,
}

impl RunConfig {
    /// Default run at test-suite scale.
    pub fn small() -> Self {
        let dataset = SyntheticDatasetSpec::small();
        Self {
            train: TrainConfig {
                epochs: 4,
                ..TrainConfig::default()
            },
            model: HrnetLiteSpec {
                height: dataset.height,
                width_px: dataset.width,
                ..HrnetLiteSpec::default()
            },
            dataset,
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| TrainError::config("<json>", e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.dataset.validate()?;
        self.model.validate().map_err(|e| TrainError::config("model", e.to_string()))?;
        self.slimming.validate().map_err(|e| TrainError::config("slimming", e.to_string()))?;
        self.swd.validate().map_err(|e| TrainError::config("swd", e.to_string()))?;
        if (self.model.height, self.model.width_px) != (self.dataset.height, self.dataset.width) {
            return Err(TrainError::config(
                "model.height/width_px",
                format!(
                    "model input {}x{} differs from dataset images {}x{}",
                    self.model.height, self.model.width_px, self.dataset.height, self.dataset.width
                ),
            ));
        }
        if self.model.n_classes != self.dataset.n_classes {
            return Err(TrainError::config("model.n_classes", "must equal dataset.n_classes"));
        }
        if self.model.in_channels != crate::data::IMAGE_CHANNELS {
            return Err(TrainError::config("model.in_channels", "synthetic images have 3 channels"));
        }
        if self.pipeline && self.regularizer == RegularizerKind::None {
            return Err(TrainError::config("pipeline", "needs regularizer `slimming` or `swd`"));
        }
        Ok(())
    }

    pub fn regularizer(&self) -> Regularizer {
        match self.regularizer {
            RegularizerKind::None => Regularizer::None,
            RegularizerKind::Slimming => Regularizer::Slimming(self.slimming.clone()),
            RegularizerKind::Swd => Regularizer::Swd(self.swd.clone()),
        }
    }
}
