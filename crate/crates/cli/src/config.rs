//! The run configuration file: TOML with one table per subsystem.

use std::path::Path;

use fgdiff::data::DatasetSpec;
use fgdiff::diffusion::{GuidanceConfig, LossConfig, NoiseSchedule};
use fgdiff::eval::ProbeConfig;
use fgdiff::network::ModelConfig;
use fgdiff::train::TrainConfig;
use fgdiff::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            beta_start: 5e-4,
            beta_end: 0.1,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    RandomProjection,
    Probe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub features: FeatureMode,
    pub projection_dim: usize,
    pub projection_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            features: FeatureMode::Probe,
            projection_dim: 64,
            projection_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub seed: u64,
    /// Images drawn per subclass.
    pub per_sub: usize,
    /// Images denoised together in one batch.
    pub batch: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            per_sub: 1,
            batch: 16,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub guidance: GuidanceConfig,
    pub loss: LossConfig,
    pub data: DatasetSpec,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub probe: ProbeConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_owned()))
    }

    /// Reads `path`, or returns the defaults when no file is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::parse(&std::fs::read_to_string(p)?),
            None => Ok(Self::default()),
        }
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config types serialize to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let schedule = self.schedule.build()?;
        self.guidance.validate(&schedule)?;
        self.loss.validate()?;
        self.train.validate()?;
        if self.sample.per_sub == 0 || self.sample.batch == 0 {
            return Err(Error::Config("sample.per_sub and sample.batch must be positive".into()));
        }
        if self.eval.projection_dim == 0 || self.probe.hidden == 0 {
            return Err(Error::Config("feature dimensions must be positive".into()));
        }
        Ok(())
    }
}
