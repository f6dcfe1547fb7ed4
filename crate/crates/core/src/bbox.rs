//! Axis-aligned boxes in corner form.
//!
//! Coordinates are continuous pixel positions with the origin at the top-left
//! corner. Area is `(x2 - x1) * (y2 - y1)` with no `+1` pixel correction.
//! Zero-area boxes are legal; they arise from degenerate masks and never win a
//! match.

use serde::{Deserialize, Serialize};

/// Corner-form box `[x1, y1, x2, y2]`.
///
/// Serialized as a four-element array so that dumps stay compact and match the
/// usual annotation tooling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BBoxError {
    #[error("box coordinates must be finite, got {0:?}")]
    NonFinite([f64; 4]),
    #[error("box corners out of order (need x1 <= x2 and y1 <= y2), got {0:?}")]
    Inverted([f64; 4]),
}

impl BBox {
    /// Validating constructor.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, BBoxError> {
        let raw = [x1, y1, x2, y2];
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(BBoxError::NonFinite(raw));
        }
        if x2 < x1 || y2 < y1 {
            return Err(BBoxError::Inverted(raw));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Area of the overlap with `other`, zero when disjoint.
    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    /// Intersection over union. Returns 0 when the union has no area.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            return 0.0;
        }
        (inter / union).clamp(0.0, 1.0)
    }

    /// Clip into `[0, width] x [0, height]`. Ordering is preserved because both
    /// corners are clipped into the same interval.
    pub fn clamp_to_image(&self, width: f64, height: f64) -> BBox {
        debug_assert!(width > 0.0 && height > 0.0);
        BBox {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }
}

/// Free-function form of [`BBox::iou`].
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

/// Free-function form of [`BBox::clamp_to_image`].
pub fn clamp_to_image(b: &BBox, width: f64, height: f64) -> BBox {
    b.clamp_to_image(width, height)
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = BBoxError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}
