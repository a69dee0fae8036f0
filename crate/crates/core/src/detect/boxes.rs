use serde::{Deserialize, Serialize};

use super::{DetectError, Result};

/// Axis-aligned box in pixel coordinates with a class id.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub class: usize,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64, class: usize) -> Result<Self> {
        let b = Self { x1, y1, x2, y2, class };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite());
        if finite && self.x1 < self.x2 && self.y1 < self.y2 {
            Ok(())
        } else {
            Err(DetectError::InvalidBox(format!("{self:?}")))
        }
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

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn inside(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }
}

/// A scored prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub score: f64,
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return Ok(0.0);
    }
    let union = a.area() + b.area() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Greedy per-class suppression. Higher score wins; equal scores favour the
/// lower input index. A box is dropped when its IoU with a kept box of the
/// same class exceeds `iou_threshold`. Output is in priority order.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Result<Vec<Detection>> {
    let order = priority_order(detections);
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let d = &detections[i];
        let mut suppressed = false;
        for &k in &kept {
            let kd: &Detection = &detections[k];
            if kd.bbox.class == d.bbox.class && iou(&kd.bbox, &d.bbox)? > iou_threshold {
                suppressed = true;
                break;
            }
        }
        if !suppressed {
            kept.push(i);
        }
    }
    Ok(kept.into_iter().map(|i| detections[i]).collect())
}

/// Indices sorted by descending score, ties by ascending index.
pub fn priority_order(detections: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .score
            .total_cmp(&detections[a].score)
            .then(a.cmp(&b))
    });
    order
}
