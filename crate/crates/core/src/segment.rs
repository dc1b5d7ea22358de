//! 1D temporal segments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-open temporal interval in frame units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
}

impl Segment {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        let s = Segment { start, end };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.start.is_finite() && self.end.is_finite()) || self.end <= self.start {
            return Err(Error::DegenerateSegment { start: self.start, end: self.end });
        }
        Ok(())
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.start + self.end)
    }

    pub fn intersection(&self, other: &Segment) -> f64 {
        (self.end.min(other.end) - self.start.max(other.start)).max(0.0)
    }

    /// Temporal IoU. Callers guarantee both segments have positive length.
    pub fn tiou_unchecked(&self, other: &Segment) -> f64 {
        let inter = self.intersection(other);
        let union = self.length() + other.length() - inter;
        inter / union
    }
}

/// Temporal intersection-over-union of two segments.
pub fn tiou(a: &Segment, b: &Segment) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(a.tiou_unchecked(b))
}

/// `1 - (tIoU - rho^2 / c^2)` with `rho` the center distance and `c` the
/// length of the smallest enclosing segment.
pub fn diou_loss_1d(pred: &Segment, target: &Segment) -> Result<f64> {
    let iou = tiou(pred, target)?;
    let rho = pred.center() - target.center();
    let c = pred.end.max(target.end) - pred.start.min(target.start);
    Ok(1.0 - iou + rho * rho / (c * c))
}
