//! End-to-end simulation: CAPS against a sweep of static thresholds.

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::io::Scenario;
use crate::par::Exec;
use crate::sim::{
    generate_stream_with, run_caps_experiment, sweep_static_thresholds, EvalReport, StaticResult,
    RNG_ALGORITHM,
};

#[derive(Debug, Clone, Serialize)]
pub struct CapsSummary {
    pub report: EvalReport,
    pub iterations: u64,
    pub final_thresholds: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct BestStatic {
    pub threshold: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulationReport {
    pub rng: &'static str,
    pub seed: u64,
    pub num_images: usize,
    pub num_classes: usize,
    pub caps: CapsSummary,
    #[serde(rename = "static")]
    pub static_results: Vec<StaticResult>,
    pub best_static: Option<BestStatic>,
    /// CAPS macro-F1 minus the best static macro-F1.
    pub caps_margin: Option<f64>,
    #[serde(skip)]
    pub initial_thresholds: Vec<f64>,
    #[serde(skip)]
    pub trajectory: Vec<Vec<f64>>,
}

impl SimulationReport {
    /// Pretty JSON with a trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// `iteration,class,delta` rows, starting with the initial thresholds at iteration 0.
    pub fn trajectory_csv(&self) -> String {
        let mut out = String::from("iteration,class,delta\n");
        let rows = std::iter::once(&self.initial_thresholds).chain(&self.trajectory);
        for (k, row) in rows.enumerate() {
            for (c, d) in row.iter().enumerate() {
                out.push_str(&format!("{k},{c},{d}\n"));
            }
        }
        out
    }

    /// SHA-256 over the JSON report followed by the CSV trajectory, lowercase hex.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_json().as_bytes());
        h.update(self.trajectory_csv().as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Generates the scenario's stream and evaluates CAPS and every static threshold on it.
pub fn simulate(scenario: &Scenario, exec: Exec) -> Result<SimulationReport> {
    scenario.validate()?;
    let n = scenario.num_classes();
    let stream = generate_stream_with(
        &scenario.classes,
        scenario.num_images,
        scenario.image_size,
        scenario.seed,
        exec,
    )?;
    let initial = scenario.initial_state();
    let caps = run_caps_experiment(&stream, &initial)?;
    let static_results = sweep_static_thresholds(&stream, &scenario.static_thresholds, n, exec);

    let best_static = static_results
        .iter()
        .filter_map(|r| r.report.macro_f1.map(|f| BestStatic { threshold: r.threshold, macro_f1: f }))
        .fold(None, |best: Option<BestStatic>, r| match best {
            Some(b) if b.macro_f1 >= r.macro_f1 => Some(b),
            _ => Some(r),
        });
    let caps_margin = match (caps.report.macro_f1, best_static) {
        (Some(c), Some(b)) => Some(c - b.macro_f1),
        _ => None,
    };

    Ok(SimulationReport {
        rng: RNG_ALGORITHM,
        seed: scenario.seed,
        num_images: scenario.num_images,
        num_classes: n,
        caps: CapsSummary {
            report: caps.report,
            iterations: caps.final_state.iter,
            final_thresholds: caps.final_state.per_class.clone(),
        },
        static_results,
        best_static,
        caps_margin,
        initial_thresholds: initial.per_class,
        trajectory: caps.trajectory,
    })
}
