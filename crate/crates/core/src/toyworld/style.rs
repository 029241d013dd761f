use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Appearance of a rendered domain. Geometry is never affected by style.
///
/// | field | range |
/// |---|---|
/// | `background` | two RGB colors in `[0, 1]`, blended top to bottom |
/// | `background_pattern` | `[0, 0.5]`, amplitude of low-frequency blotches |
/// | `texture_noise` | `[0, 0.5]`, per-pixel noise amplitude |
/// | `hue_shift` | degrees in `[-180, 180]`, rotates every class hue |
/// | `saturation`, `value` | `[0, 1]`, foreground HSV saturation / value |
/// | `edge_softness` | pixels in `[0, 4]` |
/// | `shape_distortion` | one per class, `[0, 0.5]` |
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleParams {
    pub background: [[f64; 3]; 2],
    pub background_pattern: f64,
    pub texture_noise: f64,
    pub hue_shift: f64,
    pub saturation: f64,
    pub value: f64,
    pub edge_softness: f64,
    pub shape_distortion: Vec<f64>,
}

impl StyleParams {
    /// Flat, saturated, clipart-like look.
    pub fn source_default(num_classes: usize) -> Self {
        Self {
            background: [[0.93, 0.90, 0.82], [0.86, 0.83, 0.74]],
            background_pattern: 0.0,
            texture_noise: 0.0,
            hue_shift: 0.0,
            saturation: 0.9,
            value: 0.85,
            edge_softness: 0.0,
            shape_distortion: vec![0.0; num_classes],
        }
    }

    /// Textured, desaturated, hue-shifted look.
    pub fn target_default(num_classes: usize) -> Self {
        Self {
            background: [[0.42, 0.30, 0.22], [0.58, 0.44, 0.30]],
            background_pattern: 0.12,
            texture_noise: 0.08,
            hue_shift: 40.0,
            saturation: 0.55,
            value: 0.75,
            edge_softness: 1.5,
            shape_distortion: vec![0.15; num_classes],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_range = |name: &str, v: f64, lo: f64, hi: f64| {
            if v.is_finite() && (lo..=hi).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("style.{name} = {v} outside [{lo}, {hi}]")))
            }
        };
        for c in self.background.iter().flatten() {
            in_range("background", *c, 0.0, 1.0)?;
        }
        in_range("background_pattern", self.background_pattern, 0.0, 0.5)?;
        in_range("texture_noise", self.texture_noise, 0.0, 0.5)?;
        in_range("hue_shift", self.hue_shift, -180.0, 180.0)?;
        in_range("saturation", self.saturation, 0.0, 1.0)?;
        in_range("value", self.value, 0.0, 1.0)?;
        in_range("edge_softness", self.edge_softness, 0.0, 4.0)?;
        for d in &self.shape_distortion {
            in_range("shape_distortion", *d, 0.0, 0.5)?;
        }
        Ok(())
    }
}

/// Componentwise linear interpolation between two styles.
pub fn shift_style(source: &StyleParams, target: &StyleParams, alpha: f64) -> Result<StyleParams> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    if source.shape_distortion.len() != target.shape_distortion.len() {
        return Err(Error::invalid("styles disagree on class count"));
    }
    let lerp = |a: f64, b: f64| {
        if alpha == 0.0 {
            a
        } else if alpha == 1.0 {
            b
        } else {
            a + alpha * (b - a)
        }
    };
    let mut background = source.background;
    for (row, trow) in background.iter_mut().zip(&target.background) {
        for (v, t) in row.iter_mut().zip(trow) {
            *v = lerp(*v, *t);
        }
    }
    Ok(StyleParams {
        background,
        background_pattern: lerp(source.background_pattern, target.background_pattern),
        texture_noise: lerp(source.texture_noise, target.texture_noise),
        hue_shift: lerp(source.hue_shift, target.hue_shift),
        saturation: lerp(source.saturation, target.saturation),
        value: lerp(source.value, target.value),
        edge_softness: lerp(source.edge_softness, target.edge_softness),
        shape_distortion: source
            .shape_distortion
            .iter()
            .zip(&target.shape_distortion)
            .map(|(&a, &b)| lerp(a, b))
            .collect(),
    })
}
