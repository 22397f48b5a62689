//! Run configuration: one JSON document for every command.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::data::{split_week_for_date, Dataset};
use crate::error::{GwError, Result};
use crate::evaluation::Horizon;
use crate::losses::LossWeights;
use crate::models::ModelConfig;
use crate::physics::SimConfig;
use crate::training::TrainConfig;

/// Training preset used when `train` is not given explicitly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Paper,
    #[default]
    Desk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub dir: PathBuf,
    /// Number of final weeks held out as test targets.
    pub test_weeks: usize,
    /// Last training week by date; overrides `test_weeks`.
    pub split_date: Option<NaiveDate>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data"),
            test_weeks: 104,
            split_date: None,
        }
    }
}

impl DataConfig {
    /// Index of the last training target week.
    pub fn split_week(&self, data: &Dataset) -> Result<usize> {
        match self.split_date {
            Some(d) => split_week_for_date(data.dates(), d),
            None => data
                .weeks()
                .checked_sub(self.test_weeks + 1)
                .ok_or_else(|| GwError::invalid(format!("{} test weeks exceed the series", self.test_weeks))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Rollout horizons: week counts or `inf`.
    pub horizons: Vec<String>,
    /// Horizon of the full-series reconstruction.
    pub reconstruction_horizon: usize,
    /// Every n-th test week enters component validation.
    pub component_stride: usize,
    pub map_resolution_km: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            horizons: vec!["1".into(), "26".into(), "inf".into()],
            reconstruction_horizon: 26,
            component_stride: 4,
            map_resolution_km: 1.5,
        }
    }
}

impl EvalConfig {
    pub fn horizons(&self) -> Result<Vec<Horizon>> {
        self.horizons.iter().map(|h| Horizon::parse(h)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub preset: Preset,
    pub data: DataConfig,
    pub simulate: SimConfig,
    pub model: ModelConfig,
    /// Explicit training settings; the preset for the model variant when
    /// absent.
    pub train: Option<TrainConfig>,
    pub loss_weights: LossWeights,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            preset: Preset::Desk,
            data: DataConfig::default(),
            simulate: SimConfig::default(),
            model: ModelConfig::default(),
            train: None,
            loss_weights: LossWeights::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| GwError::io(path, e))?;
        let cfg = Self::from_json(&text).map_err(|e| GwError::format(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Effective training settings, carrying the run seed.
    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train.clone().unwrap_or_else(|| match self.preset {
            Preset::Paper => TrainConfig::paper(self.model.variant),
            Preset::Desk => TrainConfig::desk(self.model.variant),
        });
        t.seed = self.seed;
        t
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.eval.horizons()?;
        if self.model.d_model % self.model.n_heads != 0 {
            return Err(GwError::invalid(format!(
                "{} heads do not divide model width {}",
                self.model.n_heads, self.model.d_model
            )));
        }
        Ok(())
    }
}
