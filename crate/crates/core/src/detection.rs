//! Detections, boxes and per-image prediction batches.
//!
//! Everything here is a plain value type. Validation clamps boxes into the
//! image frame and rejects anything that cannot be repaired by clamping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in image pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    fn is_finite(&self) -> bool {
        self.x1.is_finite() && self.y1.is_finite() && self.x2.is_finite() && self.y2.is_finite()
    }

    fn clamped(&self, width: f64, height: f64) -> BBox {
        BBox {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }
}

/// Generator-side ground truth for a synthetic detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Truth {
    /// A correct detection of the given class.
    Correct(usize),
    FalsePositive,
}

/// One teacher prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    /// Per-class confidences, one entry per configured class.
    pub class_scores: Vec<f64>,
    /// Joint confidence as declared by the producer (see `conf_semantics` in dumps).
    pub conf: f64,
    pub truth: Option<Truth>,
}

impl Detection {
    pub fn new(bbox: BBox, class_scores: Vec<f64>, conf: f64) -> Self {
        Detection {
            bbox,
            class_scores,
            conf,
            truth: None,
        }
    }

    pub fn with_truth(mut self, truth: Truth) -> Self {
        self.truth = Some(truth);
        self
    }

    /// See [`argmax_class`].
    pub fn argmax(&self) -> (usize, f64) {
        argmax_class(self)
    }
}

/// All predictions for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionBatch {
    pub image_id: String,
    pub detections: Vec<Detection>,
    /// (width, height) in pixels.
    pub image_size: (u32, u32),
}

impl PredictionBatch {
    pub fn new(image_id: impl Into<String>, image_size: (u32, u32)) -> Self {
        PredictionBatch {
            image_id: image_id.into(),
            detections: Vec::new(),
            image_size,
        }
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    /// Validates every detection against `num_classes` and the image frame.
    pub fn validate(self, num_classes: usize) -> Result<PredictionBatch> {
        let (w, h) = self.image_size;
        if w == 0 || h == 0 {
            return Err(Error::malformed(
                "image_size",
                format!("image size must be positive, got {w}x{h}"),
            ));
        }
        let detections = self
            .detections
            .into_iter()
            .map(|d| validate_detection(d, num_classes, (w, h)))
            .collect::<Result<Vec<_>>>()?;
        Ok(PredictionBatch {
            image_id: self.image_id,
            detections,
            image_size: (w, h),
        })
    }
}

/// Checks ranges and shapes, clamps the box into `[0,w]x[0,h]`.
pub fn validate_detection(
    d: Detection,
    num_classes: usize,
    image_size: (u32, u32),
) -> Result<Detection> {
    if !d.bbox.is_finite() {
        return Err(Error::malformed("bbox", "non-finite coordinate"));
    }
    if !d.conf.is_finite() || !(0.0..=1.0).contains(&d.conf) {
        return Err(Error::malformed(
            "conf",
            format!("conf out of range [0,1]: {}", d.conf),
        ));
    }
    if d.class_scores.len() != num_classes {
        return Err(Error::malformed(
            "class_scores",
            format!(
                "expected {num_classes} class scores, got {}",
                d.class_scores.len()
            ),
        ));
    }
    if let Some((i, s)) = d
        .class_scores
        .iter()
        .enumerate()
        .find(|(_, s)| !s.is_finite() || !(0.0..=1.0).contains(*s))
    {
        return Err(Error::malformed(
            "class_scores",
            format!("score {i} out of range [0,1]: {s}"),
        ));
    }
    if let Some(Truth::Correct(c)) = d.truth {
        if c >= num_classes {
            return Err(Error::malformed(
                "truth",
                format!("class {c} outside 0..{num_classes}"),
            ));
        }
    }

    let bbox = d
        .bbox
        .clamped(f64::from(image_size.0), f64::from(image_size.1));
    if bbox.x1 >= bbox.x2 || bbox.y1 >= bbox.y2 {
        return Err(Error::malformed(
            "bbox",
            format!(
                "zero area after clamping: ({}, {}, {}, {})",
                bbox.x1, bbox.y1, bbox.x2, bbox.y2
            ),
        ));
    }
    Ok(Detection { bbox, ..d })
}

/// Index and value of the highest class score; ties go to the lowest index.
///
/// Panics if `class_scores` is empty.
pub fn argmax_class(d: &Detection) -> (usize, f64) {
    assert!(!d.class_scores.is_empty(), "argmax of empty score vector");
    let mut best = (0, d.class_scores[0]);
    for (i, &s) in d.class_scores.iter().enumerate().skip(1) {
        if s > best.1 {
            best = (i, s);
        }
    }
    best
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}
