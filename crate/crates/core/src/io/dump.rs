//! JSON Lines detection dumps and pseudo-label output.
//!
//! One image per line:
//! `{"image_id", "width", "height", "conf_semantics", "detections": [{"x1","y1","x2","y2","conf","scores"}]}`.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::caps::PseudoLabelSet;
use crate::detection::{BBox, Detection, PredictionBatch};
use crate::error::{Error, Result};

use super::json_error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DumpDetection {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub conf: f64,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DumpRecord {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    /// What `conf` means, e.g. "objectness*class" or "class".
    pub conf_semantics: String,
    pub detections: Vec<DumpDetection>,
}

impl DumpRecord {
    pub fn from_batch(batch: &PredictionBatch, conf_semantics: &str) -> Self {
        DumpRecord {
            image_id: batch.image_id.clone(),
            width: batch.image_size.0,
            height: batch.image_size.1,
            conf_semantics: conf_semantics.to_string(),
            detections: batch
                .detections
                .iter()
                .map(|d| DumpDetection {
                    x1: d.bbox.x1,
                    y1: d.bbox.y1,
                    x2: d.bbox.x2,
                    y2: d.bbox.y2,
                    conf: d.conf,
                    scores: d.class_scores.clone(),
                })
                .collect(),
        }
    }

    /// Unvalidated batch; call [`PredictionBatch::validate`] before use.
    pub fn to_batch(&self) -> PredictionBatch {
        PredictionBatch {
            image_id: self.image_id.clone(),
            image_size: (self.width, self.height),
            detections: self
                .detections
                .iter()
                .map(|d| Detection::new(BBox::new(d.x1, d.y1, d.x2, d.y2), d.scores.clone(), d.conf))
                .collect(),
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("dump record serializes")
    }
}

/// Parses a dump, skipping blank lines. Errors carry the 1-based line number.
pub fn parse_dump(reader: impl BufRead) -> Result<Vec<DumpRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DumpRecord = serde_json::from_str(&line).map_err(|e| json_error(e, Some(i + 1)))?;
        if rec.conf_semantics.trim().is_empty() {
            return Err(Error::parse(Some(i + 1), "conf_semantics must be declared"));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_dump(path: impl AsRef<std::path::Path>) -> Result<Vec<DumpRecord>> {
    let f = std::fs::File::open(path)?;
    parse_dump(std::io::BufReader::new(f))
}

pub fn write_dump(mut w: impl Write, records: &[DumpRecord]) -> Result<()> {
    for r in records {
        writeln!(w, "{}", r.to_line())?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelEntry {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub conf: f64,
    pub scores: Vec<f64>,
    pub class: usize,
    pub one_hot: Vec<u8>,
}

/// One line of pseudo-label output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRecord {
    pub image_id: String,
    pub labels: Vec<LabelEntry>,
}

impl LabelRecord {
    pub fn from_set(set: &PseudoLabelSet) -> Self {
        LabelRecord {
            image_id: set.image_id.clone(),
            labels: set
                .labels
                .iter()
                .map(|l| LabelEntry {
                    x1: l.detection.bbox.x1,
                    y1: l.detection.bbox.y1,
                    x2: l.detection.bbox.x2,
                    y2: l.detection.bbox.y2,
                    conf: l.detection.conf,
                    scores: l.detection.class_scores.clone(),
                    class: l.class,
                    one_hot: l.one_hot(),
                })
                .collect(),
        }
    }
}

pub fn write_labels(mut w: impl Write, sets: &[PseudoLabelSet]) -> Result<()> {
    for s in sets {
        writeln!(w, "{}", serde_json::to_string(&LabelRecord::from_set(s)).expect("labels serialize"))?;
    }
    Ok(())
}

pub fn parse_labels(reader: impl BufRead) -> Result<Vec<LabelRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| json_error(e, Some(i + 1)))?);
    }
    Ok(out)
}
