use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::annotator::ProviderConfig;
use crate::consistency::Ratio;
use crate::corpus::SplitPlan;
use crate::trainer::{FeatureSpec, Grid, TrainConfig};

/// The whole pipeline configuration as one JSON document. Every field has a
/// default, so `{}` is a valid config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seeds student training. `with_seed` also sets the split and mock seeds.
    pub seed: u64,
    pub split: SplitPlan,
    pub provider: ProviderConfig,
    pub mock: MockSettings,
    /// Prompt id per task; defaults to the task id.
    pub prompt_ids: BTreeMap<String, String>,
    /// Prompt version to use; defaults to the latest.
    pub prompt_version: Option<u32>,
    pub validation: ValidationSettings,
    pub generation: GenerationSettings,
    pub few_shot: FewShotSettings,
    pub training: TrainingSettings,
    /// Minimum consistency for the filtered surrogate arm, e.g. `"1"` or `"2/3"`.
    pub consistency_threshold: String,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            split: SplitPlan::default(),
            provider: ProviderConfig::default(),
            mock: MockSettings::default(),
            prompt_ids: BTreeMap::new(),
            prompt_version: None,
            validation: ValidationSettings::default(),
            generation: GenerationSettings::default(),
            few_shot: FewShotSettings::default(),
            training: TrainingSettings::default(),
            consistency_threshold: "1".into(),
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Sets the global seed and the split and mock seeds with it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.split.seed = seed;
        self.mock.seed = seed;
        self
    }

    pub fn consistency_threshold(&self) -> Result<Ratio, PipelineError> {
        Ok(Ratio::parse(&self.consistency_threshold)?)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.consistency_threshold()?;
        if !(0.0..=1.0).contains(&self.mock.noise) {
            return Err(PipelineError::Config(format!("mock.noise {} outside [0, 1]", self.mock.noise)));
        }
        if self.generation.iterations == 0 {
            return Err(PipelineError::Config("generation.iterations must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.validation.gate_f1) {
            return Err(PipelineError::Config(format!("validation.gate_f1 {} outside [0, 1]", self.validation.gate_f1)));
        }
        if self.training.external.as_ref().is_some_and(|c| c.is_empty()) {
            return Err(PipelineError::Config("training.external must name a program".into()));
        }
        self.training.features.validate()?;
        Ok(())
    }
}

/// The offline teacher: gold labels flipped with probability `noise`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockSettings {
    pub noise: f64,
    pub seed: u64,
}

impl Default for MockSettings {
    fn default() -> Self {
        Self { noise: 0.1, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidationSettings {
    pub temperature: f64,
    /// Advisory minimum F1 on the prompt-validation split.
    pub gate_f1: f64,
}

impl Default for ValidationSettings {
    fn default() -> Self {
        Self { temperature: 0.0, gate_f1: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationSettings {
    pub iterations: u32,
    pub temperature: f64,
}

impl Default for GenerationSettings {
    fn default() -> Self {
        Self { iterations: 3, temperature: 0.7 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FewShotSettings {
    pub temperature: f64,
}

impl Default for FewShotSettings {
    fn default() -> Self {
        Self { temperature: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSettings {
    pub features: FeatureSpec,
    pub grid: Grid,
    pub class_weighting: bool,
    pub tail_averaging: bool,
    /// Size of the small human arm; its samples are the first of the train split.
    pub human_small_n: usize,
    /// argv of an external trainer. Replaces the built-in student when set.
    pub external: Option<Vec<String>>,
}

impl Default for TrainingSettings {
    fn default() -> Self {
        Self {
            features: FeatureSpec::default(),
            grid: Grid::default(),
            class_weighting: false,
            tail_averaging: true,
            human_small_n: 250,
            external: None,
        }
    }
}

impl TrainingSettings {
    /// Settings shared by every grid cell.
    pub fn base_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            l2: self.grid.l2,
            class_weighting: self.class_weighting,
            tail_averaging: self.tail_averaging,
            ..TrainConfig::default()
        }
    }
}
