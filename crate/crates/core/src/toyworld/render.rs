use rand::Rng;
use serde::{Deserialize, Serialize};

use super::StyleParams;
use crate::datamodel::{ClassId, FullAnnotation, Instance};
use crate::error::{Error, Result};
use crate::geom::BoundingBox;
use crate::image::RgbImage;
use crate::rng::{derive_seed, hash_unit, rng_for};

/// Object placements of one scene. The rendered annotation is exactly this
/// list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub placements: Vec<Instance>,
    pub background_id: u64,
}

impl SceneSpec {
    pub fn empty(background_id: u64) -> Self {
        Self {
            placements: Vec::new(),
            background_id,
        }
    }
}

/// Sampling ranges for procedurally generated scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub min_instances: usize,
    pub max_instances: usize,
    /// Shorter side of a placement, in pixels.
    pub min_size: u32,
    pub max_size: u32,
    /// Relative class frequencies; uniform when empty.
    pub class_weights: Vec<f64>,
    /// Placements may not overlap more than this.
    pub max_overlap_iou: f64,
    pub placement_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            min_instances: 1,
            max_instances: 8,
            min_size: 14,
            max_size: 30,
            class_weights: Vec::new(),
            max_overlap_iou: 0.0,
            placement_attempts: 50,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.min_instances > self.max_instances {
            return Err(Error::Config("scene.min_instances > scene.max_instances".into()));
        }
        if self.min_size < 2 || self.min_size > self.max_size {
            return Err(Error::Config("scene sizes must satisfy 2 <= min_size <= max_size".into()));
        }
        if !self.class_weights.is_empty()
            && (self.class_weights.len() != num_classes
                || self.class_weights.iter().any(|w| !w.is_finite() || *w < 0.0)
                || self.class_weights.iter().sum::<f64>() <= 0.0)
        {
            return Err(Error::Config(format!(
                "scene.class_weights must hold {num_classes} non-negative weights with positive sum"
            )));
        }
        if self.placement_attempts == 0 {
            return Err(Error::Config("scene.placement_attempts must be >= 1".into()));
        }
        Ok(())
    }

    /// Class mixture as probabilities.
    pub fn class_probabilities(&self, num_classes: usize) -> Vec<f64> {
        if self.class_weights.is_empty() {
            return vec![1.0 / num_classes as f64; num_classes];
        }
        let total: f64 = self.class_weights.iter().sum();
        self.class_weights.iter().map(|w| w / total).collect()
    }
}

/// Silhouette drawn for a class; classes cycle through the list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Triangle,
    Rectangle,
    Ellipse,
    Diamond,
    Cross,
}

const SHAPES: [Shape; 6] = [
    Shape::Circle,
    Shape::Triangle,
    Shape::Rectangle,
    Shape::Ellipse,
    Shape::Diamond,
    Shape::Cross,
];

pub fn shape_of(class: ClassId) -> Shape {
    SHAPES[class.index() % SHAPES.len()]
}

impl Shape {
    /// Range of width/height ratios sampled for this shape.
    fn aspect_range(self) -> (f64, f64) {
        match self {
            Shape::Ellipse => (1.6, 2.2),
            Shape::Rectangle => (1.0, 1.5),
            _ => (0.9, 1.1),
        }
    }

    /// Implicit function on box-normalized coordinates `u, v` in `[-1, 1]`;
    /// negative inside. Magnitude is roughly distance in half-box units.
    fn implicit(self, u: f64, v: f64) -> f64 {
        match self {
            Shape::Circle | Shape::Ellipse => (u * u + v * v).sqrt() - 1.0,
            Shape::Rectangle => u.abs().max(v.abs()) - 1.0,
            Shape::Diamond => u.abs() + v.abs() - 1.0,
            Shape::Triangle => {
                // apex at top, base along the bottom edge
                let side = u.abs() - (v + 1.0) * 0.5;
                side.max(v - 1.0).max(-1.0 - v) * 0.9
            }
            Shape::Cross => {
                let arm = 0.38;
                let horiz = (u.abs() - 1.0).max(v.abs() - arm);
                let vert = (u.abs() - arm).max(v.abs() - 1.0);
                horiz.min(vert)
            }
        }
    }
}

fn hsv_to_rgb(h_deg: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h_deg.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Base hue of a class before the style's hue shift.
pub fn class_hue(class: ClassId, num_classes: usize) -> f64 {
    360.0 * class.index() as f64 / num_classes.max(1) as f64
}

#[inline]
fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

struct BackgroundPattern {
    waves: [(f64, f64, f64, f64); 3],
    tint: [f64; 3],
}

impl BackgroundPattern {
    fn new(background_id: u64) -> Self {
        let mut rng = rng_for(background_id, "background", 0);
        let mut waves = [(0.0, 0.0, 0.0, 0.0); 3];
        for w in &mut waves {
            *w = (
                rng.random_range(0.03..0.12),
                rng.random_range(0.03..0.12),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.5..1.0),
            );
        }
        let tint = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        Self { waves, tint }
    }

    fn value(&self, x: f64, y: f64) -> f64 {
        let s: f64 = self.waves.iter().map(|&(fx, fy, ph, a)| a * (fx * x + fy * y + ph).sin()).sum();
        s / 3.0
    }
}

/// Render a scene. Deterministic in `(spec, style, seed)`; the returned
/// annotation equals `spec.placements`.
pub fn render_scene(
    spec: &SceneSpec,
    style: &StyleParams,
    num_classes: usize,
    width: usize,
    height: usize,
    seed: u64,
) -> (RgbImage, FullAnnotation) {
    let mut buf = vec![[0.0f64; 3]; width * height];
    let pattern = BackgroundPattern::new(spec.background_id);
    let noise_seed = derive_seed(seed, "noise", 0);
    for y in 0..height {
        let t = if height > 1 { y as f64 / (height - 1) as f64 } else { 0.0 };
        for x in 0..width {
            let blot = style.background_pattern * pattern.value(x as f64, y as f64);
            let noise = style.texture_noise * (hash_unit(noise_seed, x as u64, y as u64) - 0.5) * 2.0;
            let px = &mut buf[y * width + x];
            for c in 0..3 {
                let base = style.background[0][c] * (1.0 - t) + style.background[1][c] * t;
                px[c] = base + blot * (1.0 + 0.3 * pattern.tint[c]) + noise;
            }
        }
    }

    for (k, inst) in spec.placements.iter().enumerate() {
        draw_instance(&mut buf, width, height, inst, k as u64, style, num_classes, seed);
    }

    let mut img = RgbImage::new(width, height);
    for y in 0..height {
        for x in 0..width {
            let p = buf[y * width + x];
            img.put(x, y, [to_u8(p[0]), to_u8(p[1]), to_u8(p[2])]);
        }
    }
    (img, FullAnnotation::new(spec.placements.clone()))
}

#[allow(clippy::too_many_arguments)]
fn draw_instance(
    buf: &mut [[f64; 3]],
    width: usize,
    height: usize,
    inst: &Instance,
    k: u64,
    style: &StyleParams,
    num_classes: usize,
    seed: u64,
) {
    let shape = shape_of(inst.class);
    let mut rng = rng_for(seed, "instance", k);
    let distortion = style.shape_distortion.get(inst.class.index()).copied().unwrap_or(0.0);
    let lobes = rng.random_range(3..7) as f64;
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let hue_jitter = rng.random_range(-6.0..6.0);
    let hue = class_hue(inst.class, num_classes) + style.hue_shift + hue_jitter;
    let color = hsv_to_rgb(hue, style.saturation, style.value);
    let tex_seed = derive_seed(seed, "fgtex", k);

    let b = inst.bbox;
    let (cx, cy) = b.center();
    let (hw, hh) = (0.5 * b.width(), 0.5 * b.height());
    let scale_px = hw.min(hh);
    let x0 = b.x_min().floor().max(0.0) as usize;
    let y0 = b.y_min().floor().max(0.0) as usize;
    let x1 = (b.x_max().ceil() as usize).min(width);
    let y1 = (b.y_max().ceil() as usize).min(height);
    for y in y0..y1 {
        for x in x0..x1 {
            let u = (x as f64 + 0.5 - cx) / hw;
            let v = (y as f64 + 0.5 - cy) / hh;
            // inward-only radial wobble keeps the silhouette inside its box
            let wobble = 1.0 + distortion * 0.5 * (1.0 + (lobes * v.atan2(u) + phase).sin());
            let f = shape.implicit(u * wobble, v * wobble);
            let dist_px = f * scale_px;
            let cover = if style.edge_softness > 0.0 {
                (0.5 - dist_px / style.edge_softness).clamp(0.0, 1.0)
            } else if dist_px <= 0.0 {
                1.0
            } else {
                0.0
            };
            if cover <= 0.0 {
                continue;
            }
            let noise = style.texture_noise * (hash_unit(tex_seed, x as u64, y as u64) - 0.5) * 2.0;
            let px = &mut buf[y * width + x];
            for c in 0..3 {
                px[c] = px[c] * (1.0 - cover) + (color[c] + noise) * cover;
            }
        }
    }
}

/// Sample a scene layout from `cfg` with integer-aligned boxes.
pub fn sample_scene<R: Rng>(
    cfg: &SceneConfig,
    num_classes: usize,
    width: usize,
    height: usize,
    background_id: u64,
    rng: &mut R,
) -> SceneSpec {
    let probs = cfg.class_probabilities(num_classes);
    let count = rng.random_range(cfg.min_instances..=cfg.max_instances);
    let mut placements: Vec<Instance> = Vec::with_capacity(count);
    for _ in 0..count {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut class_idx = num_classes - 1;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                class_idx = i;
                break;
            }
        }
        let class = ClassId::from_index(class_idx);
        let (alo, ahi) = shape_of(class).aspect_range();
        for _ in 0..cfg.placement_attempts {
            let short = rng.random_range(cfg.min_size..=cfg.max_size) as f64;
            let aspect = rng.random_range(alo..=ahi);
            let long = (short * aspect).round();
            let (w, h) = if rng.random_bool(0.5) { (long, short) } else { (short, long) };
            if w >= width as f64 || h >= height as f64 {
                continue;
            }
            let x = rng.random_range(0..=(width - w as usize)) as f64;
            let y = rng.random_range(0..=(height - h as usize)) as f64;
            let Ok(bbox) = BoundingBox::new(x, y, x + w, y + h) else {
                continue;
            };
            if placements.iter().all(|p| p.bbox.iou(&bbox) <= cfg.max_overlap_iou) {
                placements.push(Instance::new(bbox, class));
                break;
            }
        }
    }
    SceneSpec {
        placements,
        background_id,
    }
}
