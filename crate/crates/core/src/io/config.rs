//! Run configuration and simulator scenarios.
//!
//! Both are strict JSON: unknown keys are rejected, absent keys take their
//! defaults, and every value is range-checked after parsing.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::caps::{
    ThresholdState, DEFAULT_ALPHA_T, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_DELTA_0,
    DEFAULT_DELTA_T, DEFAULT_NUM_BINS,
};
use crate::ema::DEFAULT_ALPHA;
use crate::error::{Error, Result};
use crate::losses::{LossWeights, DEFAULT_LAMBDA_D};
use crate::sim::ClassProfile;

use super::json_error;

pub const DEFAULT_TOTAL_ITERS: u64 = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub num_classes: usize,
    pub delta_t: f64,
    pub delta_0: f64,
    pub alpha_t: f64,
    /// Teacher EMA momentum.
    pub alpha: f64,
    pub lambda_d: f64,
    #[serde(rename = "M")]
    pub num_bins: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    #[serde(rename = "K")]
    pub total_iters: u64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            num_classes: 1,
            delta_t: DEFAULT_DELTA_T,
            delta_0: DEFAULT_DELTA_0,
            alpha_t: DEFAULT_ALPHA_T,
            alpha: DEFAULT_ALPHA,
            lambda_d: DEFAULT_LAMBDA_D,
            num_bins: DEFAULT_NUM_BINS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            total_iters: DEFAULT_TOTAL_ITERS,
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn threshold_state(&self) -> ThresholdState {
        ThresholdState {
            delta_t: self.delta_t,
            per_class: vec![self.delta_0; self.num_classes],
            alpha_t: self.alpha_t,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
            total_iters: self.total_iters,
            iter: 0,
            num_bins: self.num_bins,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: self.lambda3,
            lambda_d: self.lambda_d,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Range("num_classes must be >= 1".into()));
        }
        if !(self.alpha.is_finite() && (0.0..=1.0).contains(&self.alpha)) {
            return Err(Error::Range(format!("alpha must lie in [0,1], got {}", self.alpha)));
        }
        self.threshold_state().validate()?;
        self.loss_weights().validate()
    }
}

fn non_blank(text: &str) -> &str {
    if text.trim().is_empty() {
        "{}"
    } else {
        text
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = serde_json::from_str(non_blank(text)).map_err(|e| json_error(e, None))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}

/// CAPS hyperparameters used by a simulator scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CapsParams {
    pub delta_t: f64,
    pub delta_0: f64,
    pub alpha_t: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    #[serde(rename = "M")]
    pub num_bins: usize,
}

impl Default for CapsParams {
    fn default() -> Self {
        CapsParams {
            delta_t: DEFAULT_DELTA_T,
            delta_0: DEFAULT_DELTA_0,
            alpha_t: DEFAULT_ALPHA_T,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            num_bins: DEFAULT_NUM_BINS,
        }
    }
}

fn default_image_size() -> (u32, u32) {
    (640, 640)
}

fn default_static_thresholds() -> Vec<f64> {
    vec![0.5, 0.6, 0.7, 0.8, 0.9]
}

/// A synthetic stream plus the CAPS settings to run it with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub classes: Vec<ClassProfile>,
    pub num_images: usize,
    pub seed: u64,
    #[serde(default = "default_image_size")]
    pub image_size: (u32, u32),
    #[serde(default)]
    pub caps: CapsParams,
    #[serde(default = "default_static_thresholds")]
    pub static_thresholds: Vec<f64>,
}

impl Scenario {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Initial threshold state; the beta schedule spans the whole stream.
    pub fn initial_state(&self) -> ThresholdState {
        ThresholdState {
            delta_t: self.caps.delta_t,
            per_class: vec![self.caps.delta_0; self.num_classes()],
            alpha_t: self.caps.alpha_t,
            beta_start: self.caps.beta_start,
            beta_end: self.caps.beta_end,
            total_iters: self.num_images.max(1) as u64,
            iter: 0,
            num_bins: self.caps.num_bins,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::InvalidProfile("scenario defines no classes".into()));
        }
        for c in &self.classes {
            c.validate()?;
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return Err(Error::Range("image_size must be positive".into()));
        }
        if let Some(t) = self.static_thresholds.iter().find(|t| !t.is_finite()) {
            return Err(Error::Range(format!("static threshold {t} is not finite")));
        }
        self.initial_state().validate()
    }

    pub fn parse(text: &str) -> Result<Scenario> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| json_error(e, None))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Scenario> {
        Scenario::parse(&std::fs::read_to_string(path)?)
    }
}
