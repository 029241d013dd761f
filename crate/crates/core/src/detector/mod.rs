//! Toy fully-supervised detector: dense anchors scored by a small learned
//! trunk over fixed feature blocks, with per-anchor classification over
//! `C + 1` classes and box-offset regression.

pub mod anchors;
pub mod features;
mod train;
pub mod trunk;

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::datamodel::{ClassId, Detection, Provenance};
use crate::error::{Error, Result};
use crate::geom::{nms, nms_boxes, BoundingBox};
use crate::image::{write_file, RgbImage};
use crate::nn::{softmax, Linear, Parameters};
use crate::rng::rng_for;

pub use anchors::{anchor_grid, decode_offsets, encode_offsets, AnchorSpec, OFFSET_SCALE};
pub use features::{extract_features, BlockKind, BlockMaps, BlockSpec, FeatureBlocks, PoolSpec};
pub use train::{assign_anchors, batch_loss, fit, sample_batch, AnchorBatch, FitHyper};
pub use trunk::{pool_raw, Trunk};

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_FORMAT: &str = "dualweak-detector";

/// How predictions are emitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DetectorMode {
    /// Per-class thresholding and NMS.
    Anchor,
    /// A fixed budget of class-agnostic top detections.
    Query { num_queries: usize },
}

/// Architecture of a detector. Two models with equal specs have equal
/// weight shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorSpec {
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    pub anchors: AnchorSpec,
    pub blocks: FeatureBlocks,
    pub pool: PoolSpec,
    pub adapter_channels: usize,
    pub hidden: usize,
    pub mode: DetectorMode,
}

impl Default for DetectorSpec {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            num_classes: 6,
            anchors: AnchorSpec::default(),
            blocks: FeatureBlocks::default(),
            pool: PoolSpec::default(),
            adapter_channels: 6,
            hidden: 128,
            mode: DetectorMode::Anchor,
        }
    }
}

impl DetectorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("detector needs at least one class".into()));
        }
        if self.adapter_channels == 0 || self.hidden == 0 || self.pool.bins == 0 || self.pool.attention_grid == 0 {
            return Err(Error::Config("detector widths and grids must be positive".into()));
        }
        if !(self.pool.context >= 0.0 && self.pool.context.is_finite()) {
            return Err(Error::Config("pool context must be a finite non-negative fraction".into()));
        }
        if let DetectorMode::Query { num_queries: 0 } = self.mode {
            return Err(Error::Config("query mode needs at least one query".into()));
        }
        self.blocks.validate()?;
        self.anchors.validate(self.width, self.height)
    }
}

/// Trainable tensors of a detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorWeights {
    pub trunk: Trunk,
    /// `hidden -> C + 1`, last row is background.
    pub cls: Linear,
    /// `hidden -> 4` box offsets.
    pub reg: Linear,
}

impl DetectorWeights {
    pub fn zeros_like(&self) -> Self {
        Self {
            trunk: self.trunk.zeros_like(),
            cls: Linear::zeros(self.cls.input_dim(), self.cls.output_dim()),
            reg: Linear::zeros(self.reg.input_dim(), self.reg.output_dim()),
        }
    }
}

impl Parameters for DetectorWeights {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut v = self.trunk.tensors();
        v.extend(self.cls.tensors());
        v.extend(self.reg.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.trunk.tensors_mut();
        v.extend(self.cls.tensors_mut());
        v.extend(self.reg.tensors_mut());
        v
    }
}

/// Provenance of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    /// FSOD stage, 1 to 5.
    pub stage: u8,
    pub seed: u64,
    /// Cumulative SGD steps over all stages.
    pub steps: u64,
    /// Learning rate in effect at the last step, if trained.
    pub final_lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorModel {
    pub spec: DetectorSpec,
    pub weights: DetectorWeights,
    pub meta: TrainMeta,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    model: DetectorModel,
}

/// Detections grouped by class: `per_class[j]` holds class `j + 1`, sorted by
/// descending score.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassDetections {
    pub per_class: Vec<Vec<Detection>>,
}

impl ClassDetections {
    pub fn empty(num_classes: usize) -> Self {
        Self {
            per_class: vec![Vec::new(); num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.per_class.len()
    }

    pub fn class(&self, c: ClassId) -> &[Detection] {
        &self.per_class[c.index()]
    }

    pub fn total(&self) -> usize {
        self.per_class.iter().map(Vec::len).sum()
    }

    /// All detections, sorted by descending score (ties by class).
    pub fn flatten(&self) -> Vec<Detection> {
        let mut all: Vec<Detection> = self.per_class.iter().flatten().copied().collect();
        all.sort_by(|a, b| b.score.total_cmp(&a.score));
        all
    }
}

/// Raw per-anchor outputs for one image.
#[derive(Debug, Clone)]
pub struct AnchorScores {
    pub anchors: Vec<BoundingBox>,
    /// `N x (C + 1)` softmax probabilities.
    pub probs: Array2<f64>,
    /// `N x 4` encoded offsets.
    pub offsets: Array2<f64>,
}

const PREDICT_CHUNK: usize = 512;
const PRE_NMS_PER_CLASS: usize = 200;
const MAX_PER_CLASS: usize = 100;

impl DetectorModel {
    /// Randomly initialised model.
    pub fn fresh(spec: DetectorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng_for(seed, "detector-init", 0);
        let cells = spec.pool.bins * spec.pool.bins;
        let trunk = Trunk::new(&spec.blocks.channels(), spec.adapter_channels, cells, spec.hidden, &mut rng);
        let cls = Linear::init(spec.hidden, spec.num_classes + 1, 0.1, &mut rng);
        let reg = Linear::init(spec.hidden, 4, 0.01, &mut rng);
        Ok(Self {
            spec,
            weights: DetectorWeights { trunk, cls, reg },
            meta: TrainMeta {
                stage: 1,
                seed,
                steps: 0,
                final_lr: None,
                provenance: None,
            },
        })
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let fresh = Self::fresh(self.spec.clone(), 0)?;
        if !self.weights.trunk.same_shape(&fresh.weights.trunk)
            || self.weights.cls.weight.dim() != fresh.weights.cls.weight.dim()
            || self.weights.reg.weight.dim() != fresh.weights.reg.weight.dim()
        {
            return Err(Error::validation("detector weight shapes do not match its spec"));
        }
        if !(1..=5).contains(&self.meta.stage) {
            return Err(Error::validation(format!("stage tag {} outside 1..=5", self.meta.stage)));
        }
        Ok(())
    }

    fn check_image(&self, image: &RgbImage) -> Result<()> {
        if image.width() != self.spec.width || image.height() != self.spec.height {
            return Err(Error::invalid(format!(
                "image is {}x{}, detector expects {}x{}",
                image.width(),
                image.height(),
                self.spec.width,
                self.spec.height
            )));
        }
        Ok(())
    }

    pub fn propose_anchors(&self, image: &RgbImage) -> Result<Vec<BoundingBox>> {
        self.check_image(image)?;
        Ok(anchor_grid(&self.spec.anchors, self.spec.width, self.spec.height))
    }

    /// Pooling regions of boxes (boxes grown by the context margin).
    pub fn regions(&self, boxes: &[BoundingBox]) -> Vec<[f64; 4]> {
        boxes.iter().map(|b| b.expand(self.spec.pool.context).to_array()).collect()
    }

    /// Trunk output features (`n x hidden`) for arbitrary boxes.
    pub fn box_features(&self, maps: &BlockMaps, boxes: &[BoundingBox]) -> Array2<f64> {
        let raw = pool_raw(maps, &self.regions(boxes), self.spec.pool.bins);
        self.weights.trunk.forward(raw, boxes.len()).h
    }

    /// Class probabilities and offsets for every anchor of `image`.
    pub fn score_anchors(&self, image: &RgbImage) -> Result<AnchorScores> {
        let anchors = self.propose_anchors(image)?;
        let maps = self.spec.blocks.maps(image);
        let n = anchors.len();
        let mut probs = Array2::zeros((n, self.num_classes() + 1));
        let mut offsets = Array2::zeros((n, 4));
        for start in (0..n).step_by(PREDICT_CHUNK) {
            let end = (start + PREDICT_CHUNK).min(n);
            let h = self.box_features(&maps, &anchors[start..end]);
            let logits = self.weights.cls.forward(h.view());
            probs.slice_mut(ndarray::s![start..end, ..]).assign(&softmax(&logits, 1));
            offsets
                .slice_mut(ndarray::s![start..end, ..])
                .assign(&self.weights.reg.forward(h.view()));
        }
        Ok(AnchorScores { anchors, probs, offsets })
    }

    /// Class-grouped detections. Anchor mode drops scores below
    /// `score_threshold` and runs per-class NMS; query mode keeps the top
    /// `num_queries` class-agnostic detections after NMS, unthresholded.
    pub fn predict(&self, image: &RgbImage, score_threshold: f64, nms_threshold: f64) -> Result<ClassDetections> {
        let s = self.score_anchors(image)?;
        self.detections_from_scores(&s, score_threshold, nms_threshold)
    }

    /// Regressed anchor boxes; `None` where the decoded box is degenerate.
    pub fn decode_boxes(&self, s: &AnchorScores) -> Vec<Option<BoundingBox>> {
        let (w, h) = (self.spec.width as f64, self.spec.height as f64);
        s.anchors
            .iter()
            .zip(s.offsets.rows())
            .map(|(a, t)| decode_offsets(a, t.as_slice().expect("row"), w, h))
            .collect()
    }

    /// Post-processing half of [`DetectorModel::predict`].
    pub fn detections_from_scores(&self, s: &AnchorScores, score_threshold: f64, nms_threshold: f64) -> Result<ClassDetections> {
        let c = self.num_classes();
        let decoded = self.decode_boxes(s);
        let mut out = ClassDetections::empty(c);
        match self.spec.mode {
            DetectorMode::Anchor => {
                for j in 0..c {
                    let mut cand: Vec<Detection> = Vec::new();
                    for (i, b) in decoded.iter().enumerate() {
                        let p = s.probs[[i, j]];
                        if let Some(b) = b {
                            if p >= score_threshold && p > 0.0 {
                                cand.push(Detection::new(*b, ClassId::from_index(j), p.min(1.0))?);
                            }
                        }
                    }
                    cand.sort_by(|a, b| b.score.total_cmp(&a.score));
                    cand.truncate(PRE_NMS_PER_CLASS);
                    let mut kept = nms(&cand, nms_threshold)?;
                    kept.truncate(MAX_PER_CLASS);
                    out.per_class[j] = kept;
                }
            }
            DetectorMode::Query { num_queries } => {
                let mut boxes = Vec::new();
                let mut scores = Vec::new();
                let mut classes = Vec::new();
                for (i, b) in decoded.iter().enumerate() {
                    let Some(b) = b else { continue };
                    let (j, p) = (0..c)
                        .map(|j| (j, s.probs[[i, j]]))
                        .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
                    boxes.push(*b);
                    scores.push(p);
                    classes.push(j);
                }
                for k in nms_boxes(&boxes, &scores, nms_threshold).into_iter().take(num_queries) {
                    out.per_class[classes[k]].push(Detection::new(boxes[k], ClassId::from_index(classes[k]), scores[k].min(1.0))?);
                }
            }
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text)?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(Error::validation(format!("not a detector checkpoint: format {:?}", file.format)));
        }
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::validation(format!(
                "unsupported detector checkpoint version {} (expected {CHECKPOINT_VERSION})",
                file.version
            )));
        }
        file.model.validate()?;
        Ok(file.model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
