//! JSON persistence of the adaptive threshold state.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::caps::ThresholdState;
use crate::error::{Error, Result};

use super::json_error;

pub const STATE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassDelta {
    class: usize,
    delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateFile {
    version: u32,
    k: u64,
    #[serde(rename = "K")]
    total_iters: u64,
    delta_t: f64,
    alpha_t: f64,
    beta_start: f64,
    beta_end: f64,
    #[serde(rename = "M")]
    num_bins: usize,
    per_class: Vec<ClassDelta>,
}

/// Canonical serialization: pretty-printed, fixed key order, trailing newline.
pub fn state_to_json(state: &ThresholdState) -> String {
    let file = StateFile {
        version: STATE_VERSION,
        k: state.iter,
        total_iters: state.total_iters,
        delta_t: state.delta_t,
        alpha_t: state.alpha_t,
        beta_start: state.beta_start,
        beta_end: state.beta_end,
        num_bins: state.num_bins,
        per_class: state
            .per_class
            .iter()
            .enumerate()
            .map(|(class, &delta)| ClassDelta { class, delta })
            .collect(),
    };
    let mut s = serde_json::to_string_pretty(&file).expect("state serializes");
    s.push('\n');
    s
}

pub fn parse_state(text: &str) -> Result<ThresholdState> {
    let file: StateFile = serde_json::from_str(text).map_err(|e| json_error(e, None))?;
    if file.version != STATE_VERSION {
        return Err(Error::parse(
            None,
            format!("unsupported state version {}", file.version),
        ));
    }
    for (i, cd) in file.per_class.iter().enumerate() {
        if cd.class != i {
            return Err(Error::parse(
                None,
                format!("per_class entries must be listed in class order; entry {i} has class {}", cd.class),
            ));
        }
    }
    let state = ThresholdState {
        delta_t: file.delta_t,
        per_class: file.per_class.iter().map(|c| c.delta).collect(),
        alpha_t: file.alpha_t,
        beta_start: file.beta_start,
        beta_end: file.beta_end,
        total_iters: file.total_iters,
        iter: file.k,
        num_bins: file.num_bins,
    };
    state.validate()?;
    Ok(state)
}

pub fn save_state(path: impl AsRef<Path>, state: &ThresholdState) -> Result<()> {
    std::fs::write(path, state_to_json(state))?;
    Ok(())
}

pub fn load_state(path: impl AsRef<Path>) -> Result<ThresholdState> {
    parse_state(&std::fs::read_to_string(path)?)
}
