//! Axis-aligned box geometry, IoU, non-maximum suppression and greedy
//! detection to ground-truth matching.
//!
//! Coordinates are continuous; a box spans `[x_min, x_max) x [y_min, y_max)`
//! and its area is `(x_max - x_min) * (y_max - y_min)` with no `+1` pixel
//! correction.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::datamodel::{Detection, FullAnnotation};
use crate::error::{Error, Result};

/// A valid axis-aligned box. Construction enforces `x_min < x_max`,
/// `y_min < y_max` and finite coordinates, so every live value is valid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let finite = x_min.is_finite() && y_min.is_finite() && x_max.is_finite() && y_max.is_finite();
        if !finite || x_min >= x_max || y_min >= y_max {
            return Err(Error::InvalidBox {
                x_min,
                y_min,
                x_max,
                y_max,
            });
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Box from center and size.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }
    pub fn y_min(&self) -> f64 {
        self.y_min
    }
    pub fn x_max(&self) -> f64 {
        self.x_max
    }
    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let inter = self.intersection_area(other);
        if inter <= 0.0 {
            return 0.0;
        }
        let union = self.area() + other.area() - inter;
        (inter / union).clamp(0.0, 1.0)
    }

    /// Whether the box lies inside `[0, width] x [0, height]`.
    pub fn is_inside(&self, width: f64, height: f64) -> bool {
        self.x_min >= 0.0 && self.y_min >= 0.0 && self.x_max <= width && self.y_max <= height
    }

    /// Intersect with the canvas. `None` if nothing of the box remains.
    pub fn clip(&self, width: f64, height: f64) -> Option<BoundingBox> {
        BoundingBox::new(
            self.x_min.max(0.0),
            self.y_min.max(0.0),
            self.x_max.min(width),
            self.y_max.min(height),
        )
        .ok()
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Result<BoundingBox> {
        BoundingBox::new(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)
    }

    pub fn scale(&self, factor: f64) -> Result<BoundingBox> {
        BoundingBox::new(
            self.x_min * factor,
            self.y_min * factor,
            self.x_max * factor,
            self.y_max * factor,
        )
    }

    /// Mirror horizontally inside a canvas of the given width.
    pub fn hflip(&self, canvas_width: f64) -> BoundingBox {
        BoundingBox {
            x_min: canvas_width - self.x_max,
            y_min: self.y_min,
            x_max: canvas_width - self.x_min,
            y_max: self.y_max,
        }
    }

    /// Grow by `frac` of the width/height on every side.
    pub fn expand(&self, frac: f64) -> BoundingBox {
        let dx = self.width() * frac;
        let dy = self.height() * frac;
        BoundingBox {
            x_min: self.x_min - dx,
            y_min: self.y_min - dy,
            x_max: self.x_max + dx,
            y_max: self.y_max + dy,
        }
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BoundingBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.to_array()
    }
}

/// Intersection over union of two boxes, in `[0, 1]`.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    a.iou(b)
}

/// Descending-score order with ties broken by lower index.
pub(crate) fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].partial_cmp(&scores[i]).unwrap_or(Ordering::Equal).then(i.cmp(&j)));
    order
}

/// Greedy per-class non-maximum suppression.
///
/// A detection is dropped when its IoU with an already kept, higher-ranked
/// detection of the same class exceeds `iou_threshold`. The output is sorted
/// by descending score.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Result<Vec<Detection>> {
    if !(0.0..=1.0).contains(&iou_threshold) {
        return Err(Error::invalid(format!("nms threshold {iou_threshold} outside [0, 1]")));
    }
    if let Some(d) = dets.iter().find(|d| !d.score.is_finite()) {
        return Err(Error::invalid(format!("non-finite detection score {}", d.score)));
    }
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let order = score_order(&scores);
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let suppressed = kept
            .iter()
            .any(|&k| dets[k].class == dets[i].class && dets[k].bbox.iou(&dets[i].bbox) > iou_threshold);
        if !suppressed {
            kept.push(i);
        }
    }
    Ok(kept.into_iter().map(|i| dets[i]).collect())
}

/// Class-agnostic variant of [`nms`] used for proposal de-duplication.
pub fn nms_boxes(boxes: &[BoundingBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    let order = score_order(scores);
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        if !kept.iter().any(|&k| boxes[k].iou(&boxes[i]) > iou_threshold) {
            kept.push(i);
        }
    }
    kept
}

/// Outcome of matching detections against ground truth.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Matching {
    /// `(detection index, gt index)`
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_dets: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
}

/// VOC-style greedy matching.
///
/// Detections must already be sorted by descending score. Each detection in
/// turn claims the still-unmatched gt with the highest IoU strictly above
/// `iou_threshold` (same class when `class_aware`).
pub fn greedy_match(
    dets: &[Detection],
    gts: &FullAnnotation,
    iou_threshold: f64,
    class_aware: bool,
) -> Result<Matching> {
    if dets.windows(2).any(|w| w[0].score < w[1].score) {
        return Err(Error::invalid("detections must be sorted by descending score"));
    }
    let instances = &gts.instances;
    let mut taken = vec![false; instances.len()];
    let mut m = Matching::default();
    for (di, det) in dets.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (gi, inst) in instances.iter().enumerate() {
            if taken[gi] || (class_aware && inst.class != det.class) {
                continue;
            }
            let o = det.bbox.iou(&inst.bbox);
            if o > iou_threshold && best.is_none_or(|(_, b)| o > b) {
                best = Some((gi, o));
            }
        }
        match best {
            Some((gi, _)) => {
                taken[gi] = true;
                m.pairs.push((di, gi));
            }
            None => m.unmatched_dets.push(di),
        }
    }
    m.unmatched_gts = taken
        .iter()
        .enumerate()
        .filter(|(_, &t)| !t)
        .map(|(i, _)| i)
        .collect();
    Ok(m)
}
