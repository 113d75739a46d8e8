//! Axis-aligned boxes and the overlap measures shared by matching, losses and metrics.

use serde::{Deserialize, Serialize};

/// Corner-form rectangle. Units are whatever the caller uses (pixels for
/// annotations, `[0, 1]` for model outputs).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxXyxy {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoxXyxy {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn from_array(b: [f64; 4]) -> Self {
        Self::new(b[0], b[1], b[2], b[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    /// From COCO-style `[x_min, y_min, width, height]`.
    pub fn from_xywh(b: [f64; 4]) -> Self {
        Self::new(b[0], b[1], b[0] + b[2], b[1] + b[3])
    }

    pub fn to_xywh(self) -> [f64; 4] {
        [self.x_min, self.y_min, self.width(), self.height()]
    }

    pub fn from_cxcywh(b: [f64; 4]) -> Self {
        let [cx, cy, w, h] = b;
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn to_cxcywh(self) -> [f64; 4] {
        [
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
            self.width(),
            self.height(),
        ]
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Divides x coordinates by `width` and y coordinates by `height`.
    pub fn normalized(self, width: f64, height: f64) -> Self {
        Self::new(
            self.x_min / width,
            self.y_min / height,
            self.x_max / width,
            self.y_max / height,
        )
    }

    pub fn scaled(self, width: f64, height: f64) -> Self {
        Self::new(
            self.x_min * width,
            self.y_min * height,
            self.x_max * width,
            self.y_max * height,
        )
    }

    fn intersection(&self, other: &BoxXyxy) -> f64 {
        let w = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let h = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        w * h
    }

    fn hull(&self, other: &BoxXyxy) -> BoxXyxy {
        BoxXyxy::new(
            self.x_min.min(other.x_min),
            self.y_min.min(other.y_min),
            self.x_max.max(other.x_max),
            self.y_max.max(other.y_max),
        )
    }
}

/// Intersection over union in `[0, 1]`. Zero-area unions give 0.
pub fn iou(a: &BoxXyxy, b: &BoxXyxy) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU in `[-1, 1]`: IoU minus the fraction of the enclosing hull
/// not covered by the union.
///
/// A zero-area hull (both boxes degenerate and coincident) returns 0.
pub fn giou(a: &BoxXyxy, b: &BoxXyxy) -> f64 {
    let hull = a.hull(b).area();
    if hull <= 0.0 {
        return 0.0;
    }
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    let iou = if union <= 0.0 { 0.0 } else { inter / union };
    iou - (hull - union) / hull
}
