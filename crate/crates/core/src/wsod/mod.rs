//! Weakly supervised detection from image-level labels: a two-stream MIL
//! core with cascaded refinement heads (OICR), optionally with box regression
//! and attention self-distillation (CASD).

pub mod attention;
pub mod heads;
pub mod proposals;

use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use attention::{aggregate, attention_map, consistency_loss, consistency_with_teacher, default_transforms, ImageTransform};
pub use heads::{mlc_loss, oicr_assign, refinement_loss, regression_loss, wsddn_backward, wsddn_forward, Assignment, ScoreMatrices};
pub use proposals::{baseline_grid, dense_proposals, generate_proposals, ProposalMode, ProposalParams, ProposalSet};

use crate::datamodel::{ClassId, Dataset, Detection, Provenance, WeakAnnotation};
use crate::detector::{decode_offsets, pool_raw, AnchorSpec, BlockMaps, DetectorModel, FeatureBlocks, PoolSpec, Trunk};
use crate::error::{Error, Result};
use crate::geom::{nms, BoundingBox};
use crate::image::{write_file, RgbImage};
use crate::nn::{softmax, softmax_backward, Linear, Parameters, Sgd};
use crate::rng::rng_for;

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_FORMAT: &str = "dualweak-wsod";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Oicr,
    Casd,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oicr" => Ok(Variant::Oicr),
            "casd" => Ok(Variant::Casd),
            other => Err(Error::Config(format!("unknown WSOD variant {other:?} (expected oicr or casd)"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Oicr => "oicr",
            Variant::Casd => "casd",
        })
    }
}

/// Architecture and loss configuration carried by a WSOD checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WsodConfig {
    pub variant: Variant,
    pub num_heads: usize,
    pub lambda_d: f64,
    pub lambda_g: f64,
    pub lambda_i: f64,
    pub transforms: Vec<ImageTransform>,
    pub fg_iou: f64,
    /// Proposals from the adapted detector; otherwise a fixed dense grid.
    pub use_op: bool,
    /// Initialise the shared layers from the detector's trunk.
    pub use_fe: bool,
    pub proposals: ProposalParams,
    pub grid: AnchorSpec,
    pub infer_nms: f64,
}

impl Default for WsodConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Casd,
            num_heads: 3,
            lambda_d: 1.0,
            lambda_g: 1.0,
            lambda_i: 0.05,
            transforms: default_transforms(),
            fg_iou: 0.5,
            use_op: true,
            use_fe: true,
            proposals: ProposalParams::default(),
            grid: baseline_grid(),
            infer_nms: 0.4,
        }
    }
}

impl WsodConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 {
            return Err(Error::Config("at least one refinement head is required".into()));
        }
        if [self.lambda_d, self.lambda_g, self.lambda_i].iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if self.transforms.is_empty() || self.transforms.iter().any(|t| !(t.scale > 0.0 && t.scale <= 1.0)) {
            return Err(Error::Config("transform set must be non-empty with scales in (0, 1]".into()));
        }
        self.proposals.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WsodHyper {
    pub steps: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_at: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Gradient norm cap per step; 0 disables.
    pub clip_norm: f64,
}

impl Default for WsodHyper {
    fn default() -> Self {
        Self {
            steps: 800,
            lr: 0.01,
            lr_decay: 0.1,
            decay_at: 0.7,
            momentum: 0.9,
            weight_decay: 5e-4,
            clip_norm: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WsodWeights {
    pub trunk: Trunk,
    pub cls: Linear,
    pub det: Linear,
    pub refine: Vec<Linear>,
    pub regress: Vec<Linear>,
}

impl WsodWeights {
    pub fn zeros_like(&self) -> Self {
        let z = |l: &Linear| Linear::zeros(l.input_dim(), l.output_dim());
        Self {
            trunk: self.trunk.zeros_like(),
            cls: z(&self.cls),
            det: z(&self.det),
            refine: self.refine.iter().map(z).collect(),
            regress: self.regress.iter().map(z).collect(),
        }
    }
}

impl Parameters for WsodWeights {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut v = self.trunk.tensors();
        v.extend(self.cls.tensors());
        v.extend(self.det.tensors());
        for l in self.refine.iter().chain(&self.regress) {
            v.extend(l.tensors());
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.trunk.tensors_mut();
        v.extend(self.cls.tensors_mut());
        v.extend(self.det.tensors_mut());
        for l in self.refine.iter_mut().chain(self.regress.iter_mut()) {
            v.extend(l.tensors_mut());
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WsodMeta {
    pub seed: u64,
    pub steps: u64,
    /// Whether the shared layers were copied from the detector.
    pub fe_initialised: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WsodModel {
    pub config: WsodConfig,
    pub num_classes: usize,
    pub width: usize,
    pub height: usize,
    pub blocks: FeatureBlocks,
    pub pool: PoolSpec,
    pub weights: WsodWeights,
    pub meta: WsodMeta,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    model: WsodModel,
}

/// Loss-side pseudo targets, frozen within one step.
#[derive(Debug, Clone, PartialEq)]
pub struct WsodTargets {
    pub heads: Vec<Assignment>,
    pub iw_teacher: Vec<Vec<f64>>,
    pub lw_teacher: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LossParts {
    pub mlc: f64,
    pub refine: Vec<f64>,
    pub regress: Vec<f64>,
    pub iw: f64,
    pub lw: f64,
    pub total: f64,
}

/// One training image with its fixed proposals.
#[derive(Debug, Clone)]
pub struct WsodSample {
    pub image: RgbImage,
    pub weak: WeakAnnotation,
    pub boxes: Vec<BoundingBox>,
}

fn transform_image(image: &RgbImage, t: ImageTransform) -> (RgbImage, f64, f64) {
    let mut img = if t.scale == 1.0 {
        image.clone()
    } else {
        let w = ((image.width() as f64 * t.scale).round() as usize).max(1);
        let h = ((image.height() as f64 * t.scale).round() as usize).max(1);
        let k = (1.0 / t.scale).round() as usize;
        if k >= 1 && image.width() % k == 0 && image.height() % k == 0 && w * k == image.width() {
            image.downscale(k)
        } else {
            image.resize_nearest(w, h)
        }
    };
    let sx = img.width() as f64 / image.width() as f64;
    let sy = img.height() as f64 / image.height() as f64;
    if t.hflip {
        img = img.flip_horizontal();
    }
    (img, sx, sy)
}

fn transform_box(b: &BoundingBox, t: ImageTransform, sx: f64, sy: f64, width: f64) -> [f64; 4] {
    let (x0, x1) = (b.x_min() * sx, b.x_max() * sx);
    let (y0, y1) = (b.y_min() * sy, b.y_max() * sy);
    if t.hflip {
        [width - x1, y0, width - x0, y1]
    } else {
        [x0, y0, x1, y1]
    }
}

/// Per-cell `sigmoid(mean)` over the given blocks of an adapter cache, for
/// proposal `i`; also returns the channel count averaged over.
fn member_map(out: &[Array2<f64>], blocks: &[usize], i: usize, cells: usize, grid: usize, flip: bool) -> (Vec<f64>, f64) {
    let f = out[0].ncols();
    let n = (blocks.len() * f) as f64;
    let mut map = vec![0.0; cells];
    for (cell, v) in map.iter_mut().enumerate() {
        let src = if flip {
            let (r, c) = (cell / grid, cell % grid);
            r * grid + (grid - 1 - c)
        } else {
            cell
        };
        let row = i * cells + src;
        let s: f64 = blocks.iter().map(|&q| out[q].row(row).sum()).sum();
        *v = crate::nn::sigmoid(s / n);
    }
    (map, n)
}

/// Scatter `dL/d member` back onto adapter outputs.
#[allow(clippy::too_many_arguments)]
fn member_backward(
    d_out: &mut [Array2<f64>],
    blocks: &[usize],
    i: usize,
    cells: usize,
    grid: usize,
    flip: bool,
    map: &[f64],
    g: &[f64],
    n: f64,
) {
    for cell in 0..cells {
        let src = if flip {
            let (r, c) = (cell / grid, cell % grid);
            r * grid + (grid - 1 - c)
        } else {
            cell
        };
        let s = map[cell];
        let d = g[cell] * s * (1.0 - s) / n;
        let row = i * cells + src;
        for &q in blocks {
            d_out[q].row_mut(row).mapv_inplace(|v| v + d);
        }
    }
}

impl WsodModel {
    /// Fresh model; shared layers come from `fsod` when `config.use_fe`.
    pub fn new(config: WsodConfig, fsod: &DetectorModel, seed: u64) -> Result<Self> {
        config.validate()?;
        let spec = &fsod.spec;
        let c = spec.num_classes;
        let d = spec.hidden;
        let mut rng = rng_for(seed, "wsod-init", 0);
        let cells = spec.pool.bins * spec.pool.bins;
        let random_trunk = Trunk::new(&spec.blocks.channels(), spec.adapter_channels, cells, d, &mut rng);
        let (trunk, fe) = if config.use_fe && random_trunk.same_shape(&fsod.weights.trunk) {
            (fsod.weights.trunk.clone(), true)
        } else {
            (random_trunk, false)
        };
        let cls = Linear::init(d, c, 0.1, &mut rng);
        let det = Linear::init(d, c, 0.1, &mut rng);
        let refine = (0..config.num_heads).map(|_| Linear::init(d, c + 1, 0.1, &mut rng)).collect();
        let regress = (0..config.num_heads).map(|_| Linear::init(d, 4, 0.01, &mut rng)).collect();
        Ok(Self {
            config,
            num_classes: c,
            width: spec.width,
            height: spec.height,
            blocks: spec.blocks.clone(),
            pool: spec.pool,
            weights: WsodWeights {
                trunk,
                cls,
                det,
                refine,
                regress,
            },
            meta: WsodMeta {
                seed,
                steps: 0,
                fe_initialised: fe,
                provenance: None,
            },
        })
    }

    fn regions(&self, boxes: &[BoundingBox]) -> Vec<[f64; 4]> {
        boxes.iter().map(|b| b.expand(self.pool.context).to_array()).collect()
    }

    /// Proposal features `V`, one row per box.
    pub fn features(&self, maps: &BlockMaps, boxes: &[BoundingBox]) -> Array2<f64> {
        let raw = pool_raw(maps, &self.regions(boxes), self.pool.bins);
        self.weights.trunk.forward(raw, boxes.len()).h
    }

    pub fn wsddn(&self, v: &Array2<f64>) -> Result<ScoreMatrices> {
        wsddn_forward(&self.weights.cls.forward(v.view()), &self.weights.det.forward(v.view()))
    }

    /// Softmax outputs of every refinement head.
    pub fn refinement_scores(&self, v: &Array2<f64>) -> Vec<Array2<f64>> {
        self.weights.refine.iter().map(|l| softmax(&l.forward(v.view()), 1)).collect()
    }

    /// Proposals for an image under this model's proposal source.
    pub fn proposals(
        &self,
        fsod: &DetectorModel,
        image: &RgbImage,
        weak: Option<&WeakAnnotation>,
        mode: ProposalMode,
    ) -> Result<ProposalSet> {
        if self.config.use_op {
            generate_proposals(fsod, image, weak, mode, &self.config.proposals)
        } else {
            Ok(dense_proposals(&self.config.grid, self.width, self.height))
        }
    }

    /// Loss and gradient on one image. Pseudo targets are computed from the
    /// current scores unless `frozen` is given.
    pub fn loss_and_grad(
        &self,
        sample: &WsodSample,
        frozen: Option<&WsodTargets>,
    ) -> Result<(LossParts, WsodWeights, WsodTargets)> {
        let cfg = &self.config;
        let w = &self.weights;
        let m = sample.boxes.len();
        let c = self.num_classes;
        let maps = self.blocks.maps(&sample.image);
        let raw = pool_raw(&maps, &self.regions(&sample.boxes), self.pool.bins);
        let cache = w.trunk.forward(raw, m);
        let v = &cache.h;
        let mut grad = w.zeros_like();
        let mut parts = LossParts::default();

        let sm = self.wsddn(v)?;
        let (mlc, dp) = mlc_loss(sm.p.as_slice().expect("contiguous"), &sample.weak);
        parts.mlc = mlc;
        let (dxc, dxd) = wsddn_backward(&sm, &dp);
        let mut dv = w.cls.backward(v.view(), dxc.view(), &mut grad.cls);
        dv += &w.det.backward(v.view(), dxd.view(), &mut grad.det);

        let casd = cfg.variant == Variant::Casd;
        let mut heads = Vec::with_capacity(cfg.num_heads);
        let mut prev = sm.x0.clone();
        for p in 0..cfg.num_heads {
            let r = softmax(&w.refine[p].forward(v.view()), 1);
            let asg = match frozen {
                Some(t) => t.heads[p].clone(),
                None => oicr_assign(prev.view(), &sample.boxes, &sample.weak, cfg.fg_iou),
            };
            let (lr, dr) = refinement_loss(&r, &asg.labels, &asg.weights);
            parts.refine.push(lr);
            let dlog = softmax_backward(&r, &dr, 1) * cfg.lambda_d;
            dv += &w.refine[p].backward(v.view(), dlog.view(), &mut grad.refine[p]);
            if casd {
                let out = w.regress[p].forward(v.view());
                let (lg, dg) = regression_loss(&out, &asg.labels, &asg.seed_boxes, &sample.boxes, c);
                parts.regress.push(lg);
                let dg = dg * cfg.lambda_g;
                dv += &w.regress[p].backward(v.view(), dg.view(), &mut grad.regress[p]);
            }
            prev = r.slice(ndarray::s![.., ..c]).to_owned();
            heads.push(asg);
        }
        w.trunk.backward(&cache, &dv, &mut grad.trunk);

        let mut targets = WsodTargets {
            heads,
            iw_teacher: Vec::new(),
            lw_teacher: Vec::new(),
        };
        if casd && cfg.lambda_i > 0.0 {
            let scale = cfg.lambda_i * cfg.num_heads as f64;
            let (iw, iw_t) = self.input_wise(sample, &maps, frozen.map(|f| &f.iw_teacher[..]), &mut grad, scale);
            let (lw, lw_t) = self.layer_wise(sample, &maps, frozen.map(|f| &f.lw_teacher[..]), &mut grad, scale);
            parts.iw = iw;
            parts.lw = lw;
            targets.iw_teacher = iw_t;
            targets.lw_teacher = lw_t;
        }
        parts.total = parts.mlc
            + cfg.lambda_d * parts.refine.iter().sum::<f64>()
            + cfg.lambda_g * parts.regress.iter().sum::<f64>()
            + cfg.lambda_i * cfg.num_heads as f64 * (parts.iw + parts.lw);
        Ok((parts, grad, targets))
    }

    /// Input-wise consistency over the configured transforms. Adds `scale`
    /// times its gradient into `grad`; returns the unscaled loss and the
    /// per-proposal teachers.
    pub fn input_wise(
        &self,
        sample: &WsodSample,
        base_maps: &BlockMaps,
        frozen: Option<&[Vec<f64>]>,
        grad: &mut WsodWeights,
        scale: f64,
    ) -> (f64, Vec<Vec<f64>>) {
        let trunk = &self.weights.trunk;
        let grid = self.pool.attention_grid;
        let cells = grid * grid;
        let q_all: Vec<usize> = (0..self.blocks.len()).collect();
        let mut caches = Vec::new();
        let mut valid = Vec::new();
        for &t in &self.config.transforms {
            let (img, sx, sy) = transform_image(&sample.image, t);
            let (tw, th) = (img.width() as f64, img.height() as f64);
            let maps = if t.scale == 1.0 && !t.hflip {
                base_maps.clone()
            } else {
                self.blocks.maps(&img)
            };
            let regions: Vec<[f64; 4]> = sample.boxes.iter().map(|b| transform_box(b, t, sx, sy, tw)).collect();
            valid.push(
                regions
                    .iter()
                    .map(|r| r[0] >= -1e-9 && r[1] >= -1e-9 && r[2] <= tw + 1e-9 && r[3] <= th + 1e-9 && r[2] > r[0] && r[3] > r[1])
                    .collect::<Vec<bool>>(),
            );
            caches.push(trunk.adapters_forward(pool_raw(&maps, &regions, grid)));
        }
        let mut d_outs: Vec<Vec<Array2<f64>>> = caches
            .iter()
            .map(|c| c.out.iter().map(|o| Array2::zeros(o.raw_dim())).collect())
            .collect();
        let mut loss = 0.0;
        let mut teachers = Vec::with_capacity(sample.boxes.len());
        for i in 0..sample.boxes.len() {
            let mut members = Vec::new();
            let mut index = Vec::new();
            for (k, t) in self.config.transforms.iter().enumerate() {
                if valid[k][i] {
                    members.push(member_map(&caches[k].out, &q_all, i, cells, grid, t.hflip));
                    index.push(k);
                }
            }
            if members.is_empty() {
                teachers.push(Vec::new());
                continue;
            }
            let maps_only: Vec<Vec<f64>> = members.iter().map(|(mm, _)| mm.clone()).collect();
            let teacher = match frozen {
                Some(f) => f[i].clone(),
                None => aggregate(&maps_only),
            };
            let (l, g) = consistency_with_teacher(&maps_only, &teacher);
            loss += l;
            for ((k, (mm, n)), gm) in index.iter().zip(&members).zip(&g) {
                let gm: Vec<f64> = gm.iter().map(|x| x * scale).collect();
                let flip = self.config.transforms[*k].hflip;
                member_backward(&mut d_outs[*k], &q_all, i, cells, grid, flip, mm, &gm, *n);
            }
            teachers.push(teacher);
        }
        for (cache, d) in caches.iter().zip(&d_outs) {
            trunk.adapters_backward(cache, d, &mut grad.trunk);
        }
        (loss, teachers)
    }

    /// Layer-wise consistency across feature blocks on the untransformed
    /// image; same conventions as [`Self::input_wise`].
    pub fn layer_wise(
        &self,
        sample: &WsodSample,
        base_maps: &BlockMaps,
        frozen: Option<&[Vec<f64>]>,
        grad: &mut WsodWeights,
        scale: f64,
    ) -> (f64, Vec<Vec<f64>>) {
        let trunk = &self.weights.trunk;
        let grid = self.pool.attention_grid;
        let cells = grid * grid;
        let regions: Vec<[f64; 4]> = sample.boxes.iter().map(|b| b.to_array()).collect();
        let base = trunk.adapters_forward(pool_raw(base_maps, &regions, grid));
        let mut d_base: Vec<Array2<f64>> = base.out.iter().map(|o| Array2::zeros(o.raw_dim())).collect();
        let mut loss = 0.0;
        let mut teachers = Vec::with_capacity(sample.boxes.len());
        for i in 0..sample.boxes.len() {
            let members: Vec<(Vec<f64>, f64)> =
                (0..self.blocks.len()).map(|q| member_map(&base.out, &[q], i, cells, grid, false)).collect();
            let maps_only: Vec<Vec<f64>> = members.iter().map(|(mm, _)| mm.clone()).collect();
            let teacher = match frozen {
                Some(f) => f[i].clone(),
                None => aggregate(&maps_only),
            };
            let (l, g) = consistency_with_teacher(&maps_only, &teacher);
            loss += l;
            for (q, ((mm, n), gm)) in members.iter().zip(&g).enumerate() {
                let gm: Vec<f64> = gm.iter().map(|x| x * scale).collect();
                member_backward(&mut d_base, &[q], i, cells, grid, false, mm, &gm, *n);
            }
            teachers.push(teacher);
        }
        trunk.adapters_backward(&base, &d_base, &mut grad.trunk);
        (loss, teachers)
    }

    /// Scored detections for one image.
    pub fn infer(&self, fsod: &DetectorModel, image: &RgbImage) -> Result<Vec<Detection>> {
        let props = self.proposals(fsod, image, None, ProposalMode::All)?;
        self.infer_on(image, &props.boxes)
    }

    /// Detections over given proposals: mean refinement-head scores, last
    /// head's box offsets (CASD only), per-class NMS.
    pub fn infer_on(&self, image: &RgbImage, boxes: &[BoundingBox]) -> Result<Vec<Detection>> {
        if image.width() != self.width || image.height() != self.height {
            return Err(Error::invalid("image size differs from the model's"));
        }
        if boxes.is_empty() {
            return Ok(Vec::new());
        }
        let c = self.num_classes;
        let maps = self.blocks.maps(image);
        let v = self.features(&maps, boxes);
        let heads = self.refinement_scores(&v);
        let mut mean = Array2::<f64>::zeros((boxes.len(), c));
        for r in &heads {
            mean += &r.slice(ndarray::s![.., ..c]);
        }
        mean /= heads.len() as f64;
        let final_boxes: Vec<BoundingBox> = if self.config.variant == Variant::Casd {
            let off = self.weights.regress.last().expect("P >= 1").forward(v.view());
            boxes
                .iter()
                .zip(off.axis_iter(Axis(0)))
                .map(|(b, t)| {
                    decode_offsets(b, &[t[0], t[1], t[2], t[3]], self.width as f64, self.height as f64).unwrap_or(*b)
                })
                .collect()
        } else {
            boxes.to_vec()
        };
        let mut out = Vec::new();
        for j in 0..c {
            let mut cand: Vec<Detection> = Vec::new();
            for (i, b) in final_boxes.iter().enumerate() {
                let s = mean[[i, j]];
                if s > 0.0 {
                    cand.push(Detection::new(*b, ClassId::from_index(j), s.min(1.0))?);
                }
            }
            cand.sort_by(|a, b| b.score.total_cmp(&a.score));
            cand.truncate(200);
            let mut kept = nms(&cand, self.config.infer_nms)?;
            kept.truncate(100);
            out.extend(kept);
        }
        out.sort_by(|a, b| b.score.total_cmp(&a.score));
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
        if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
            return Err(Error::validation(format!(
                "not a version {CHECKPOINT_VERSION} WSOD checkpoint (format {:?}, version {})",
                file.format, file.version
            )));
        }
        let m = file.model;
        if m.weights.refine.len() != m.config.num_heads || m.weights.regress.len() != m.config.num_heads {
            return Err(Error::validation("WSOD head count does not match its config"));
        }
        Ok(m)
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

/// Training images with their proposals; images without any are skipped.
pub fn prepare_samples(model: &WsodModel, ds: &Dataset, fsod: &DetectorModel) -> Result<Vec<WsodSample>> {
    let mut out = Vec::with_capacity(ds.len());
    for item in &ds.items {
        let Some(weak) = item.weak.as_ref() else {
            return Err(Error::invalid(format!("item {} has no weak label", item.name)));
        };
        match model.proposals(fsod, &item.image, Some(weak), ProposalMode::ClassFiltered) {
            Ok(p) => out.push(WsodSample {
                image: item.image.clone(),
                weak: weak.clone(),
                boxes: p.boxes,
            }),
            Err(Error::InvalidInput(msg)) => log::warn!("skipping {}: {msg}", item.name),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Train a WSOD model on weakly labeled images.
pub fn train_wsod(config: &WsodConfig, ds: &Dataset, fsod: &DetectorModel, hyper: &WsodHyper, seed: u64) -> Result<WsodModel> {
    let mut model = WsodModel::new(config.clone(), fsod, seed)?;
    let samples = prepare_samples(&model, ds, fsod)?;
    if samples.is_empty() {
        return Err(Error::invalid("no usable images for WSOD training"));
    }
    let mut opt = Sgd::new(hyper.lr, hyper.momentum, hyper.weight_decay);
    let decay_step = (hyper.decay_at * hyper.steps as f64).floor() as usize;
    let mut order_rng = rng_for(seed, "wsod-order", 0);
    let mut order: Vec<usize> = Vec::new();
    for step in 0..hyper.steps {
        opt.lr = if step >= decay_step { hyper.lr * hyper.lr_decay } else { hyper.lr };
        if order.is_empty() {
            order = (0..samples.len()).collect();
            order.shuffle(&mut order_rng);
            order.reverse();
        }
        let idx = order.pop().expect("refilled");
        let (parts, mut grad, _) = model.loss_and_grad(&samples[idx], None)?;
        let norm = grad.l2_norm();
        if hyper.clip_norm > 0.0 && norm > hyper.clip_norm {
            grad.scale(hyper.clip_norm / norm);
        }
        if step % 100 == 0 {
            log::debug!("wsod step {step}: |g|={norm:.3e} {parts:?}");
        }
        opt.step(&mut model.weights, &grad);
    }
    model.meta.steps = hyper.steps as u64;
    Ok(model)
}
