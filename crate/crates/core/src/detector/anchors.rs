use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::BoundingBox;

/// Dense anchor grid: one anchor per (cell, scale, aspect ratio).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSpec {
    pub stride: usize,
    /// Square-root of anchor area, in pixels.
    pub scales: Vec<f64>,
    /// Width / height ratios.
    pub aspect_ratios: Vec<f64>,
    /// Smallest acceptable anchor count per image.
    pub min_count: usize,
}

impl Default for AnchorSpec {
    fn default() -> Self {
        Self {
            stride: 8,
            scales: vec![16.0, 26.0],
            aspect_ratios: vec![0.5, 1.0, 2.0],
            min_count: 300,
        }
    }
}

impl AnchorSpec {
    pub fn count(&self, width: usize, height: usize) -> usize {
        (width / self.stride) * (height / self.stride) * self.scales.len() * self.aspect_ratios.len()
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if self.stride == 0 || self.scales.is_empty() || self.aspect_ratios.is_empty() {
            return Err(Error::Config("anchor grid needs stride >= 1 and at least one scale and ratio".into()));
        }
        if self.scales.iter().chain(&self.aspect_ratios).any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::Config("anchor scales and ratios must be positive".into()));
        }
        let n = self.count(width, height);
        if n < self.min_count {
            return Err(Error::Config(format!(
                "anchor grid yields {n} anchors on {width}x{height}, below the minimum {}",
                self.min_count
            )));
        }
        Ok(())
    }
}

/// Anchors for a `width x height` image, clipped to the canvas. Order:
/// row-major cells, then scales, then ratios.
pub fn anchor_grid(spec: &AnchorSpec, width: usize, height: usize) -> Vec<BoundingBox> {
    let (w, h) = (width as f64, height as f64);
    let stride = spec.stride as f64;
    let mut out = Vec::with_capacity(spec.count(width, height));
    for gy in 0..height / spec.stride {
        for gx in 0..width / spec.stride {
            let cx = (gx as f64 + 0.5) * stride;
            let cy = (gy as f64 + 0.5) * stride;
            for &s in &spec.scales {
                for &r in &spec.aspect_ratios {
                    let aw = s * r.sqrt();
                    let ah = s / r.sqrt();
                    let b = BoundingBox::from_center(cx, cy, aw, ah)
                        .ok()
                        .and_then(|b| b.clip(w, h))
                        .expect("anchor centers lie inside the canvas");
                    out.push(b);
                }
            }
        }
    }
    out
}

/// Normalisation applied to regression targets.
pub const OFFSET_SCALE: [f64; 4] = [0.1, 0.1, 0.2, 0.2];
const MAX_LOG_RATIO: f64 = 4.135; // ln(1000 / 16)

/// Offsets `(dcx / w, dcy / h, ln(w' / w), ln(h' / h))`, divided by
/// [`OFFSET_SCALE`].
pub fn encode_offsets(from: &BoundingBox, to: &BoundingBox) -> [f64; 4] {
    let (acx, acy) = from.center();
    let (gcx, gcy) = to.center();
    [
        (gcx - acx) / from.width() / OFFSET_SCALE[0],
        (gcy - acy) / from.height() / OFFSET_SCALE[1],
        (to.width() / from.width()).ln() / OFFSET_SCALE[2],
        (to.height() / from.height()).ln() / OFFSET_SCALE[3],
    ]
}

/// Inverse of [`encode_offsets`], clipped to the canvas.
pub fn decode_offsets(from: &BoundingBox, t: &[f64], width: f64, height: f64) -> Option<BoundingBox> {
    let (acx, acy) = from.center();
    let cx = acx + t[0] * OFFSET_SCALE[0] * from.width();
    let cy = acy + t[1] * OFFSET_SCALE[1] * from.height();
    let w = from.width() * (t[2] * OFFSET_SCALE[2]).clamp(-MAX_LOG_RATIO, MAX_LOG_RATIO).exp();
    let h = from.height() * (t[3] * OFFSET_SCALE[3]).clamp(-MAX_LOG_RATIO, MAX_LOG_RATIO).exp();
    let b = BoundingBox::from_center(cx, cy, w, h).ok()?.clip(width, height)?;
    (b.area() >= 1.0).then_some(b)
}
