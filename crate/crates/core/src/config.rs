//! Versioned key-value run configuration, read from TOML.
//!
//! ```toml
//! version = 1
//! seed = 7
//! epsilon = 0.0          # negative: every rule active
//!
//! [train]
//! epochs = 1000
//! lr_grid = [0.001, 0.01, 0.1]
//!
//! [cv]
//! n_splits = 50
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cv::SplitPlan;
use crate::diagnostics::BenchmarkScores;
use crate::error::{Error, Result};
use crate::gate::TrainConfig;
use crate::identification::{IdentConfig, DEFAULT_TRIM};
use crate::rules::{Activity, RuleId};
use crate::two_step::{TwoStepConfig, Weighting, DEFAULT_FLOOR};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvSection {
    pub n_splits: usize,
    pub train_fraction: f64,
    pub inner_val_fraction: f64,
    pub curve_fractions: Vec<f64>,
}

impl Default for CvSection {
    fn default() -> Self {
        let p = SplitPlan::default();
        CvSection {
            n_splits: p.n_splits,
            train_fraction: p.train_fraction,
            inner_val_fraction: p.inner_val_fraction,
            curve_fractions: crate::cv::DEFAULT_CURVE_FRACTIONS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdentSection {
    pub k: usize,
    pub trim: f64,
}

impl Default for IdentSection {
    fn default() -> Self {
        IdentSection {
            k: 50,
            trim: DEFAULT_TRIM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwoStepSection {
    pub baseline: RuleId,
    pub floor: f64,
    pub resamples: usize,
    pub weighting: Weighting,
    pub noise_correction: bool,
}

impl Default for TwoStepSection {
    fn default() -> Self {
        let d = TwoStepConfig::default();
        TwoStepSection {
            baseline: d.baseline,
            floor: DEFAULT_FLOOR,
            resamples: d.resamples,
            weighting: d.weighting,
            noise_correction: d.noise_correction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsSection {
    pub benchmarks: BenchmarkScores,
    pub permutations: usize,
    pub bins: usize,
    pub crossfit_k: Vec<usize>,
    pub family_k: Vec<usize>,
    pub placebo_strata: usize,
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        DiagnosticsSection {
            benchmarks: BenchmarkScores::default(),
            permutations: 10,
            bins: 10,
            crossfit_k: vec![3, 5, 7, 9, 12],
            family_k: vec![1, 2, 3, 4, 5],
            placebo_strata: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub version: u32,
    pub seed: u64,
    pub threads: Option<usize>,
    /// Dominance threshold for activity; negative makes every rule active.
    pub epsilon: f64,
    pub library: Vec<RuleId>,
    pub train: TrainConfig,
    pub cv: CvSection,
    pub ident: IdentSection,
    pub two_step: TwoStepSection,
    pub diagnostics: DiagnosticsSection,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            version: CONFIG_VERSION,
            seed: 0,
            threads: None,
            epsilon: 0.0,
            library: RuleId::ALL.to_vec(),
            train: TrainConfig::default(),
            cv: CvSection::default(),
            ident: IdentSection::default(),
            two_step: TwoStepSection::default(),
            diagnostics: DiagnosticsSection::default(),
        }
    }
}

impl Config {
    pub fn from_toml(s: &str) -> Result<Self> {
        let raw: toml::Table = toml::from_str(s)?;
        let version = raw
            .get("version")
            .and_then(|v| v.as_integer())
            .ok_or_else(|| Error::SchemaViolation("config needs an integer `version`".into()))?;
        if version != CONFIG_VERSION as i64 {
            return Err(Error::UnsupportedVersion(version.clamp(0, u32::MAX as i64) as u32));
        }
        let c: Config = toml::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidArgument(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.split_plan().validate()?;
        if self.library.is_empty() {
            return Err(Error::InvalidArgument("library is empty".into()));
        }
        if !(self.ident.trim > 0.0 && self.ident.trim < 0.5) {
            return Err(Error::InvalidArgument("trim must lie in (0, 0.5)".into()));
        }
        if self.two_step.resamples < 2 {
            return Err(Error::InvalidArgument("need at least 2 bootstrap resamples".into()));
        }
        if !(self.two_step.floor > 0.0) {
            return Err(Error::InvalidArgument("floor must be positive".into()));
        }
        Ok(())
    }

    pub fn activity(&self) -> Activity {
        Activity::from_epsilon(self.epsilon)
    }

    pub fn split_plan(&self) -> SplitPlan {
        SplitPlan {
            n_splits: self.cv.n_splits,
            train_fraction: self.cv.train_fraction,
            inner_val_fraction: self.cv.inner_val_fraction,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn ident_config(&self) -> IdentConfig {
        IdentConfig {
            library: self.library.clone(),
            k: self.ident.k,
            trim: self.ident.trim,
            seed: self.seed,
        }
    }

    pub fn two_step_config(&self) -> TwoStepConfig {
        TwoStepConfig {
            library: self.library.clone(),
            baseline: self.two_step.baseline,
            k: self.ident.k,
            trim: self.ident.trim,
            floor: self.two_step.floor,
            resamples: self.two_step.resamples,
            weighting: self.two_step.weighting,
            noise_correction: self.two_step.noise_correction,
            seed: self.seed,
        }
    }
}
