//! Adaptive pseudo-label selection and domain-alignment numerics for
//! teacher-student cross-domain object detection.
//!
//! - [`caps`]: class-aware adaptive confidence thresholds.
//! - [`saliency`]: box rasterization and feature reweighting.
//! - [`ema`]: teacher weight mixing.
//! - [`losses`]: adversarial alignment losses and a logistic discriminator.
//! - [`sim`]: synthetic target-domain streams for evaluating selection policies.
//! - [`io`]: file formats; [`cli`]: the command-line front end.

pub mod caps;
pub mod cli;
pub mod detection;
pub mod ema;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod par;
pub mod report;
pub mod saliency;
pub mod sim;

pub use caps::{caps_step, PseudoLabel, PseudoLabelSet, ThresholdState};
pub use detection::{BBox, Detection, PredictionBatch};
pub use error::{Error, Result};
pub use par::Exec;
