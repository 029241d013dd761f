//! Fixed multi-resolution feature blocks and area-exact grid pooling.
//!
//! Each block turns an image into a per-pixel channel map at its own
//! resolution and stores it as an integral image. Pooling a continuous box
//! over a grid reads the integral image with bilinear interpolation, which is
//! exact for piecewise-constant pixels, so pooled values change smoothly with
//! box coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::BoundingBox;
use crate::image::RgbImage;

/// What a block computes per pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// r, g, b, chroma
    Color,
    /// |dI/dx|, |dI/dy|, gradient magnitude
    Edges,
    /// red-green, yellow-blue, intensity
    Opponent,
}

impl BlockKind {
    pub fn channels(self) -> usize {
        match self {
            BlockKind::Color => 4,
            BlockKind::Edges | BlockKind::Opponent => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: BlockKind,
    /// Integer downsampling factor of the block's map.
    pub scale: usize,
}

/// Ordered feature blocks `B_1 .. B_Q`, `Q >= 2`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureBlocks {
    pub blocks: Vec<BlockSpec>,
}

impl Default for FeatureBlocks {
    fn default() -> Self {
        Self {
            blocks: vec![
                BlockSpec {
                    kind: BlockKind::Color,
                    scale: 1,
                },
                BlockSpec {
                    kind: BlockKind::Edges,
                    scale: 2,
                },
                BlockSpec {
                    kind: BlockKind::Opponent,
                    scale: 4,
                },
            ],
        }
    }
}

impl FeatureBlocks {
    pub fn validate(&self) -> Result<()> {
        if self.blocks.len() < 2 {
            return Err(Error::Config("at least two feature blocks are required".into()));
        }
        if self.blocks.iter().any(|b| b.scale == 0) {
            return Err(Error::Config("feature block scale must be >= 1".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn channels(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.kind.channels()).collect()
    }

    pub fn maps(&self, image: &RgbImage) -> BlockMaps {
        BlockMaps {
            maps: self.blocks.iter().map(|b| IntegralMap::compute(image, *b)).collect(),
        }
    }
}

/// One block's channel map stored as an integral image.
#[derive(Debug, Clone)]
pub struct IntegralMap {
    width: usize,
    height: usize,
    scale: f64,
    channels: usize,
    /// `(height + 1) x (width + 1) x channels`, zero first row/column.
    sums: Vec<f64>,
}

fn downsample_float(image: &RgbImage, factor: usize) -> (usize, usize, Vec<[f64; 3]>) {
    let w = (image.width() / factor).max(1);
    let h = (image.height() / factor).max(1);
    let mut out = vec![[0.0; 3]; w * h];
    let inv = 1.0 / (255.0 * (factor * factor) as f64);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for dy in 0..factor {
                for dx in 0..factor {
                    let p = image.get(
                        (x * factor + dx).min(image.width() - 1),
                        (y * factor + dy).min(image.height() - 1),
                    );
                    for c in 0..3 {
                        acc[c] += p[c] as f64;
                    }
                }
            }
            out[y * w + x] = [acc[0] * inv, acc[1] * inv, acc[2] * inv];
        }
    }
    (w, h, out)
}

impl IntegralMap {
    fn compute(image: &RgbImage, spec: BlockSpec) -> Self {
        let (w, h, px) = downsample_float(image, spec.scale);
        let k = spec.kind.channels();
        let mut dense = vec![0.0; w * h * k];
        let intensity: Vec<f64> = px.iter().map(|p| (p[0] + p[1] + p[2]) / 3.0).collect();
        for y in 0..h {
            for x in 0..w {
                let p = px[y * w + x];
                let o = (y * w + x) * k;
                match spec.kind {
                    BlockKind::Color => {
                        let mx = p[0].max(p[1]).max(p[2]);
                        let mn = p[0].min(p[1]).min(p[2]);
                        dense[o..o + 4].copy_from_slice(&[p[0], p[1], p[2], mx - mn]);
                    }
                    BlockKind::Edges => {
                        let at = |xx: usize, yy: usize| intensity[yy * w + xx];
                        let gx = 0.5 * (at((x + 1).min(w - 1), y) - at(x.saturating_sub(1), y));
                        let gy = 0.5 * (at(x, (y + 1).min(h - 1)) - at(x, y.saturating_sub(1)));
                        dense[o] = 2.0 * gx.abs();
                        dense[o + 1] = 2.0 * gy.abs();
                        dense[o + 2] = 2.0 * (gx * gx + gy * gy).sqrt();
                    }
                    BlockKind::Opponent => {
                        dense[o] = p[0] - p[1];
                        dense[o + 1] = 0.5 * (p[0] + p[1]) - p[2];
                        dense[o + 2] = intensity[y * w + x];
                    }
                }
            }
        }
        let stride = (w + 1) * k;
        let mut sums = vec![0.0; (h + 1) * stride];
        for y in 0..h {
            let mut row = vec![0.0; k];
            for x in 0..w {
                let o = (y * w + x) * k;
                for c in 0..k {
                    row[c] += dense[o + c];
                    sums[(y + 1) * stride + (x + 1) * k + c] = sums[y * stride + (x + 1) * k + c] + row[c];
                }
            }
        }
        Self {
            width: w,
            height: h,
            scale: spec.scale as f64,
            channels: k,
            sums,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Accumulate `weight * S(x, y)` into `out`, with `S` bilinearly
    /// interpolated at continuous map coordinates.
    #[inline]
    fn add_corner(&self, x: f64, y: f64, weight: f64, out: &mut [f64]) {
        let k = self.channels;
        let stride = (self.width + 1) * k;
        let (xi, fx) = split(x, self.width);
        let (yi, fy) = split(y, self.height);
        let w00 = (1.0 - fx) * (1.0 - fy) * weight;
        let w10 = fx * (1.0 - fy) * weight;
        let w01 = (1.0 - fx) * fy * weight;
        let w11 = fx * fy * weight;
        let r0 = yi * stride + xi * k;
        let r1 = (yi + 1).min(self.height) * stride + xi * k;
        let step = if xi < self.width { k } else { 0 };
        for c in 0..k {
            out[c] += w00 * self.sums[r0 + c]
                + w10 * self.sums[r0 + step + c]
                + w01 * self.sums[r1 + c]
                + w11 * self.sums[r1 + step + c];
        }
    }

    /// Mean of each channel over an image-coordinate rectangle, written to
    /// `out`. Parts outside the image are ignored; an empty intersection
    /// yields zeros.
    pub fn mean_over(&self, x0: f64, y0: f64, x1: f64, y1: f64, out: &mut [f64]) {
        out.fill(0.0);
        let s = self.scale;
        let ax = (x0 / s).clamp(0.0, self.width as f64);
        let bx = (x1 / s).clamp(0.0, self.width as f64);
        let ay = (y0 / s).clamp(0.0, self.height as f64);
        let by = (y1 / s).clamp(0.0, self.height as f64);
        let area = (bx - ax) * (by - ay);
        if area <= 1e-9 {
            return;
        }
        let inv = 1.0 / area;
        self.add_corner(bx, by, inv, out);
        self.add_corner(ax, by, -inv, out);
        self.add_corner(bx, ay, -inv, out);
        self.add_corner(ax, ay, inv, out);
    }
}

#[inline]
fn split(v: f64, max: usize) -> (usize, f64) {
    let i = v.floor();
    let iu = i as usize;
    if iu >= max {
        (max, 0.0)
    } else {
        (iu, v - i)
    }
}

/// Integral maps of every block for one image.
#[derive(Debug, Clone)]
pub struct BlockMaps {
    pub maps: Vec<IntegralMap>,
}

impl BlockMaps {
    /// Pool block `q` over a `grid x grid` partition of `region`; returns
    /// `grid^2 * channels` values, cells row-major.
    pub fn pool_block(&self, q: usize, region: [f64; 4], grid: usize, out: &mut Vec<f64>) {
        let map = &self.maps[q];
        let k = map.channels;
        let [x0, y0, x1, y1] = region;
        let cw = (x1 - x0) / grid as f64;
        let ch = (y1 - y0) / grid as f64;
        let mut cell = vec![0.0; k];
        for gy in 0..grid {
            for gx in 0..grid {
                let cx0 = x0 + gx as f64 * cw;
                let cy0 = y0 + gy as f64 * ch;
                map.mean_over(cx0, cy0, cx0 + cw, cy0 + ch, &mut cell);
                out.extend_from_slice(&cell);
            }
        }
    }
}

/// Pooling layout shared by detector and WSOD feature pathways.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolSpec {
    /// Grid used for the proposal feature vector.
    pub bins: usize,
    /// Context margin added on each side, as a fraction of box size.
    pub context: f64,
    /// Grid used for attention maps.
    pub attention_grid: usize,
}

impl Default for PoolSpec {
    fn default() -> Self {
        Self {
            bins: 4,
            context: 0.25,
            attention_grid: 7,
        }
    }
}

pub const MIN_BOX_AREA: f64 = 1e-6;

/// Fixed-length pooled vector of one box: for each block, `bins^2` cells of
/// its channels, over the box grown by the context margin.
pub fn extract_features(blocks: &FeatureBlocks, pool: &PoolSpec, image: &RgbImage, bbox: &BoundingBox) -> Result<Vec<f64>> {
    if bbox.area() < MIN_BOX_AREA {
        return Err(Error::invalid(format!("degenerate box {:?}", bbox.to_array())));
    }
    let maps = blocks.maps(image);
    let region = bbox.expand(pool.context).to_array();
    let mut out = Vec::new();
    for q in 0..blocks.len() {
        maps.pool_block(q, region, pool.bins, &mut out);
    }
    Ok(out)
}
