//! Canonical records shared by every pipeline stage.
//!
//! Slice indices are 0-based everywhere. Boxes are stored as
//! `[x_tl, y_tl, x_br, y_br]` in pixel units.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in pixel coordinates, top-left and bottom-right corners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x_tl: f64,
    pub y_tl: f64,
    pub x_br: f64,
    pub y_br: f64,
}

impl BoundingBox {
    pub fn new(x_tl: f64, y_tl: f64, x_br: f64, y_br: f64) -> Result<Self> {
        let b = BoundingBox {
            x_tl,
            y_tl,
            x_br,
            y_br,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.coords();
        if c.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput(format!(
                "box coordinates must be finite and non-negative: {c:?}"
            )));
        }
        if self.x_tl > self.x_br || self.y_tl > self.y_br {
            return Err(Error::InvalidInput(format!(
                "box corners out of order: {c:?}"
            )));
        }
        Ok(())
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x_tl, self.y_tl, self.x_br, self.y_br]
    }

    pub fn width(&self) -> f64 {
        self.x_br - self.x_tl
    }

    pub fn height(&self) -> f64 {
        self.y_br - self.y_tl
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn fits_within(&self, height: usize, width: usize) -> bool {
        self.x_br <= width as f64 && self.y_br <= height as f64
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(c: [f64; 4]) -> Result<Self> {
        BoundingBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.coords()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Left, Side::Right];

    /// Offset of this side's box within an 8-wide node feature vector.
    pub fn feature_offset(self) -> usize {
        match self {
            Side::Left => 0,
            Side::Right => 4,
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Side::Left => f.write_str("left"),
            Side::Right => f.write_str("right"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Ground-truth annotation for one slice.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SliceLabel {
    #[serde(default)]
    pub normal_boxes: Vec<(Side, BoundingBox)>,
    #[serde(default)]
    pub abnormal_boxes: Vec<(Side, BoundingBox)>,
}

impl SliceLabel {
    pub fn is_empty(&self) -> bool {
        self.normal_boxes.is_empty() && self.abnormal_boxes.is_empty()
    }

    pub fn has_abnormal(&self) -> bool {
        !self.abnormal_boxes.is_empty()
    }

    pub fn abnormal_box(&self, side: Side) -> Option<BoundingBox> {
        self.abnormal_boxes
            .iter()
            .find(|(s, _)| *s == side)
            .map(|(_, b)| *b)
    }

    fn validate(&self, height: usize, width: usize) -> std::result::Result<(), String> {
        for (kind, boxes) in [
            ("normal", &self.normal_boxes),
            ("abnormal", &self.abnormal_boxes),
        ] {
            for side in Side::BOTH {
                if boxes.iter().filter(|(s, _)| *s == side).count() > 1 {
                    return Err(format!("more than one {kind} box for side {side}"));
                }
            }
            for (_, b) in boxes {
                b.validate().map_err(|e| e.to_string())?;
                if !b.fits_within(height, width) {
                    return Err(format!(
                        "{kind} box {:?} exceeds image bounds {height}x{width}",
                        b.coords()
                    ));
                }
            }
        }
        Ok(())
    }
}

/// One patient scan: an ordered run of slices plus its annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRecord {
    pub scan_id: String,
    pub n_slices: usize,
    pub labels: BTreeMap<usize, SliceLabel>,
    pub split: Split,
    /// `(height, width)` in pixels.
    pub image_dims: (usize, usize),
}

impl ScanRecord {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::validation(format!("scan {}", self.scan_id), msg));
        if self.n_slices == 0 {
            return fail("n_slices must be at least 1".into());
        }
        let (h, w) = self.image_dims;
        if h == 0 || w == 0 {
            return fail(format!("image_dims must be positive, got {h}x{w}"));
        }
        for (&idx, label) in &self.labels {
            if idx >= self.n_slices {
                return fail(format!(
                    "label slice {idx} out of range (n_slices = {})",
                    self.n_slices
                ));
            }
            if let Err(msg) = label.validate(h, w) {
                return fail(format!("slice {idx}: {msg}"));
            }
        }
        Ok(())
    }

    /// Ground truth scan class: abnormal iff any slice carries an abnormal box.
    pub fn is_abnormal(&self) -> bool {
        self.labels.values().any(SliceLabel::has_abnormal)
    }

    pub fn abnormal_slices(&self, side: Side) -> Vec<usize> {
        self.labels
            .iter()
            .filter(|(_, l)| l.abnormal_box(side).is_some())
            .map(|(&i, _)| i)
            .collect()
    }

    /// First and last slice carrying any adrenal annotation.
    pub fn annotated_span(&self) -> Option<(usize, usize)> {
        let mut it = self
            .labels
            .iter()
            .filter(|(_, l)| !l.is_empty())
            .map(|(&i, _)| i);
        let first = it.next()?;
        let last = it.next_back().unwrap_or(first);
        Some((first, last))
    }
}

/// One detector's output for one slice and side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub scan_id: String,
    pub slice_index: usize,
    pub model_id: usize,
    pub side: Side,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub score: f64,
}

impl DetectionRecord {
    pub fn validate(&self, n_slices: usize, num_models: Option<usize>) -> Result<()> {
        let record = || {
            format!(
                "detection {}/slice {}/model {}",
                self.scan_id, self.slice_index, self.model_id
            )
        };
        if self.slice_index >= n_slices {
            return Err(Error::validation(
                record(),
                format!("slice_index out of range (n_slices = {n_slices})"),
            ));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::validation(
                record(),
                format!("score {} outside [0, 1]", self.score),
            ));
        }
        if let Some(k) = num_models {
            if self.model_id >= k {
                return Err(Error::validation(
                    record(),
                    format!("model_id must be below {k}"),
                ));
            }
        }
        self.bbox
            .validate()
            .map_err(|e| Error::validation(record(), e.to_string()))
    }
}

/// Row-major grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage<P> {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<P>,
}

/// Raw scanner slice; holds signed and unsigned 16-bit values alike.
pub type GrayImage16 = GrayImage<i32>;
pub type GrayImage8 = GrayImage<u8>;

impl<P: Copy> GrayImage<P> {
    pub fn new(height: usize, width: usize, pixels: Vec<P>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::InvalidInput(format!(
                "pixel count {} does not match {height}x{width}",
                pixels.len()
            )));
        }
        Ok(GrayImage {
            height,
            width,
            pixels,
        })
    }

    pub fn get(&self, row: usize, col: usize) -> P {
        self.pixels[row * self.width + col]
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_serializes_as_array() {
        let b = BoundingBox::new(1.0, 2.0, 3.0, 4.0).unwrap();
        assert_eq!(serde_json::to_string(&b).unwrap(), "[1.0,2.0,3.0,4.0]");
        let back: BoundingBox = serde_json::from_str("[1,2,3,4]").unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn box_rejects_inverted_or_negative() {
        assert!(BoundingBox::new(5.0, 0.0, 1.0, 1.0).is_err());
        assert!(BoundingBox::new(-1.0, 0.0, 1.0, 1.0).is_err());
        assert!(serde_json::from_str::<BoundingBox>("[0,5,1,1]").is_err());
    }

    #[test]
    fn scan_validation_names_the_record() {
        let mut labels = BTreeMap::new();
        labels.insert(7, SliceLabel::default());
        let scan = ScanRecord {
            scan_id: "s1".into(),
            n_slices: 5,
            labels,
            split: Split::Train,
            image_dims: (64, 64),
        };
        let err = scan.validate().unwrap_err().to_string();
        assert!(err.contains("scan s1"), "{err}");
    }

    #[test]
    fn duplicate_side_box_is_rejected() {
        let b = BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let label = SliceLabel {
            normal_boxes: vec![],
            abnormal_boxes: vec![(Side::Left, b), (Side::Left, b)],
        };
        assert!(label.validate(10, 10).is_err());
    }

    #[test]
    fn detection_score_range() {
        let d = DetectionRecord {
            scan_id: "a".into(),
            slice_index: 0,
            model_id: 0,
            side: Side::Right,
            bbox: BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
            score: 1.2,
        };
        assert!(d.validate(1, Some(5)).is_err());
    }

    #[test]
    fn annotated_span_covers_normal_and_abnormal() {
        let b = BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let mut labels = BTreeMap::new();
        labels.insert(
            3,
            SliceLabel {
                normal_boxes: vec![(Side::Left, b)],
                abnormal_boxes: vec![],
            },
        );
        labels.insert(
            9,
            SliceLabel {
                normal_boxes: vec![],
                abnormal_boxes: vec![(Side::Right, b)],
            },
        );
        let scan = ScanRecord {
            scan_id: "s".into(),
            n_slices: 20,
            labels,
            split: Split::Test,
            image_dims: (8, 8),
        };
        assert_eq!(scan.annotated_span(), Some((3, 9)));
        assert!(scan.is_abnormal());
        assert_eq!(scan.abnormal_slices(Side::Right), vec![9]);
        assert!(scan.abnormal_slices(Side::Left).is_empty());
    }
}
