//! File formats and configuration.

pub mod config;
pub mod dump;
pub mod state;
pub mod tensor;

pub use config::{load_config, parse_config, RunConfig, Scenario};
pub use dump::{parse_dump, read_dump, write_dump, write_labels, DumpRecord, LabelRecord};
pub use state::{load_state, parse_state, save_state, state_to_json};
pub use tensor::{read_tensor, write_tensor, DType, Tensor};

use crate::error::Error;

/// Maps a serde_json failure to a parse error carrying its line.
pub(crate) fn json_error(e: serde_json::Error, line_offset: Option<usize>) -> Error {
    let line = match line_offset {
        Some(l) => Some(l),
        None if e.line() > 0 => Some(e.line()),
        None => None,
    };
    Error::parse(line, e.to_string())
}
