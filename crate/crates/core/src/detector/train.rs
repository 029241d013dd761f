use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::anchors::{anchor_grid, encode_offsets};
use super::trunk::pool_raw;
use super::{DetectorModel, DetectorWeights};
use crate::datamodel::{Dataset, FullAnnotation};
use crate::error::{Error, Result};
use crate::geom::BoundingBox;
use crate::image::RgbImage;
use crate::nn::{smooth_l1, softmax, Sgd};
use crate::rng::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitHyper {
    pub steps: usize,
    pub batch_images: usize,
    pub anchors_per_image: usize,
    pub positive_fraction: f64,
    /// Starting rate; `None` continues at the init model's final rate.
    pub lr: Option<f64>,
    /// Multiplier applied once `decay_at * steps` steps have run.
    pub lr_decay: f64,
    pub decay_at: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub reg_weight: f64,
    pub pos_iou: f64,
    pub neg_iou: f64,
    /// Each gt's best anchors become positive if their IoU reaches this.
    pub low_quality_iou: f64,
    /// Stage tag written to the result.
    pub stage: u8,
    pub seed: u64,
}

impl Default for FitHyper {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_images: 2,
            anchors_per_image: 128,
            positive_fraction: 0.25,
            lr: None,
            lr_decay: 1.0,
            decay_at: 0.7,
            momentum: 0.9,
            weight_decay: 1e-4,
            reg_weight: 1.0,
            pos_iou: 0.5,
            neg_iou: 0.3,
            low_quality_iou: 0.3,
            stage: 1,
            seed: 0,
        }
    }
}

impl FitHyper {
    pub fn validate(&self) -> Result<()> {
        if self.batch_images == 0 || self.anchors_per_image == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) || !(0.0..=1.0).contains(&self.decay_at) {
            return Err(Error::Config("positive_fraction and decay_at must lie in [0, 1]".into()));
        }
        if self.lr.is_some_and(|lr| !(lr > 0.0 && lr.is_finite())) || !(self.lr_decay > 0.0) {
            return Err(Error::Config("learning rate and decay must be positive".into()));
        }
        if !(self.neg_iou <= self.pos_iou) {
            return Err(Error::Config("neg_iou must not exceed pos_iou".into()));
        }
        if !(1..=5).contains(&self.stage) {
            return Err(Error::Config(format!("stage tag {} outside 1..=5", self.stage)));
        }
        Ok(())
    }
}

/// Per-anchor training target: `Some(gt index)` positive, `None` negative.
/// Anchors absent from the returned list are ignored.
pub fn assign_anchors(anchors: &[BoundingBox], gts: &FullAnnotation, hyper: &FitHyper) -> Vec<(usize, Option<usize>)> {
    let n = anchors.len();
    let mut best = vec![(0.0f64, usize::MAX); n];
    let mut per_gt_best = vec![0.0f64; gts.len()];
    for (g, inst) in gts.instances.iter().enumerate() {
        for (i, a) in anchors.iter().enumerate() {
            let v = a.iou(&inst.bbox);
            if v > best[i].0 {
                best[i] = (v, g);
            }
            per_gt_best[g] = per_gt_best[g].max(v);
        }
    }
    let mut positive: Vec<Option<usize>> = best
        .iter()
        .map(|&(v, g)| (v >= hyper.pos_iou && g != usize::MAX).then_some(g))
        .collect();
    for (g, inst) in gts.instances.iter().enumerate() {
        let top = per_gt_best[g];
        if top < hyper.low_quality_iou || top <= 0.0 {
            continue;
        }
        for (i, a) in anchors.iter().enumerate() {
            if positive[i].is_none() && a.iou(&inst.bbox) == top {
                positive[i] = Some(g);
            }
        }
    }
    (0..n)
        .filter_map(|i| match positive[i] {
            Some(g) => Some((i, Some(g))),
            None if best[i].0 < hyper.neg_iou => Some((i, None)),
            None => None,
        })
        .collect()
}

/// Pooled inputs and targets for a set of sampled anchors.
#[derive(Debug, Clone)]
pub struct AnchorBatch {
    pub raw: Vec<Array2<f64>>,
    /// Class index in `0..C`, or `C` for background.
    pub labels: Vec<usize>,
    /// Encoded offsets, meaningful for positives only.
    pub targets: Vec<[f64; 4]>,
}

impl AnchorBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn append(&mut self, other: AnchorBatch) {
        if self.raw.is_empty() {
            *self = other;
            return;
        }
        for (a, b) in self.raw.iter_mut().zip(other.raw) {
            let mut joined = Array2::zeros((a.nrows() + b.nrows(), a.ncols()));
            joined.slice_mut(ndarray::s![..a.nrows(), ..]).assign(a);
            joined.slice_mut(ndarray::s![a.nrows().., ..]).assign(&b);
            *a = joined;
        }
        self.labels.extend(other.labels);
        self.targets.extend(other.targets);
    }
}

/// Sample training anchors for one image.
pub fn sample_batch<R: Rng>(
    model: &DetectorModel,
    anchors: &[BoundingBox],
    image: &RgbImage,
    gts: &FullAnnotation,
    hyper: &FitHyper,
    rng: &mut R,
) -> AnchorBatch {
    let assigned = assign_anchors(anchors, gts, hyper);
    let (mut pos, mut neg): (Vec<_>, Vec<_>) = assigned.into_iter().partition(|(_, g)| g.is_some());
    pos.shuffle(rng);
    neg.shuffle(rng);
    let max_pos = ((hyper.anchors_per_image as f64) * hyper.positive_fraction).round() as usize;
    pos.truncate(max_pos);
    neg.truncate(hyper.anchors_per_image - pos.len());
    let chosen: Vec<_> = pos.into_iter().chain(neg).collect();
    let c = model.num_classes();
    let mut labels = Vec::with_capacity(chosen.len());
    let mut targets = Vec::with_capacity(chosen.len());
    let mut boxes = Vec::with_capacity(chosen.len());
    for (i, g) in chosen {
        boxes.push(anchors[i]);
        match g {
            Some(g) => {
                let inst = &gts.instances[g];
                labels.push(inst.class.index());
                targets.push(encode_offsets(&anchors[i], &inst.bbox));
            }
            None => {
                labels.push(c);
                targets.push([0.0; 4]);
            }
        }
    }
    let maps = model.spec.blocks.maps(image);
    let raw = pool_raw(&maps, &model.regions(&boxes), model.spec.pool.bins);
    AnchorBatch { raw, labels, targets }
}

/// Mean cross-entropy over the batch plus `reg_weight` times the summed
/// smooth-L1 offset error of positives divided by batch size, with gradient.
pub fn batch_loss(weights: &DetectorWeights, batch: &AnchorBatch, reg_weight: f64) -> (f64, DetectorWeights) {
    let n = batch.len();
    let mut grad = weights.zeros_like();
    if n == 0 {
        return (0.0, grad);
    }
    let c1 = weights.cls.output_dim();
    let cache = weights.trunk.forward(batch.raw.clone(), n);
    let logits = weights.cls.forward(cache.h.view());
    let probs = softmax(&logits, 1);
    let offsets = weights.reg.forward(cache.h.view());
    let inv = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut d_logits = probs.clone();
    let mut d_off = Array2::zeros((n, 4));
    for i in 0..n {
        let y = batch.labels[i];
        loss -= probs[[i, y]].max(1e-300).ln() * inv;
        d_logits[[i, y]] -= 1.0;
        if y + 1 < c1 {
            for k in 0..4 {
                let (v, dv) = smooth_l1(offsets[[i, k]] - batch.targets[i][k]);
                loss += reg_weight * v * inv;
                d_off[[i, k]] = reg_weight * dv * inv;
            }
        }
    }
    d_logits *= inv;
    let mut dh = weights.cls.backward(cache.h.view(), d_logits.view(), &mut grad.cls);
    dh += &weights.reg.backward(cache.h.view(), d_off.view(), &mut grad.reg);
    weights.trunk.backward(&cache, &dh, &mut grad.trunk);
    (loss, grad)
}

/// SGD training of `init` on a fully annotated dataset.
pub fn fit(init: &DetectorModel, ds: &Dataset, hyper: &FitHyper) -> Result<DetectorModel> {
    hyper.validate()?;
    if ds.is_empty() {
        return Err(Error::invalid("cannot fit a detector on an empty dataset"));
    }
    if ds.width != init.spec.width || ds.height != init.spec.height {
        return Err(Error::invalid(format!(
            "dataset is {}x{}, detector expects {}x{}",
            ds.width, ds.height, init.spec.width, init.spec.height
        )));
    }
    let mut gts = Vec::with_capacity(ds.len());
    for item in &ds.items {
        let full = item
            .full
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("item {} lacks full annotation", item.name)))?;
        full.validate(init.num_classes(), ds.width as f64, ds.height as f64)?;
        gts.push(full);
    }
    if hyper.steps == 0 {
        return Ok(init.clone());
    }
    let base_lr = hyper
        .lr
        .or(init.meta.final_lr)
        .ok_or_else(|| Error::Config("no learning rate given and init model has none to inherit".into()))?;
    let anchors = anchor_grid(&init.spec.anchors, init.spec.width, init.spec.height);
    let mut model = init.clone();
    let mut opt = Sgd::new(base_lr, hyper.momentum, hyper.weight_decay);
    let mut order_rng = rng_for(hyper.seed, "fit-order", 0);
    let mut order: Vec<usize> = Vec::new();
    let decay_step = (hyper.decay_at * hyper.steps as f64).floor() as usize;
    for step in 0..hyper.steps {
        opt.lr = if step >= decay_step { base_lr * hyper.lr_decay } else { base_lr };
        let mut rng = rng_for(hyper.seed, "fit-sample", step as u64);
        let mut batch: Option<AnchorBatch> = None;
        for _ in 0..hyper.batch_images {
            if order.is_empty() {
                order = (0..ds.len()).collect();
                order.shuffle(&mut order_rng);
                order.reverse();
            }
            let idx = order.pop().expect("refilled");
            let b = sample_batch(&model, &anchors, &ds.items[idx].image, gts[idx], hyper, &mut rng);
            match batch.as_mut() {
                Some(acc) => acc.append(b),
                None => batch = Some(b),
            }
        }
        let batch = batch.expect("batch_images >= 1");
        let (_, grad) = batch_loss(&model.weights, &batch, hyper.reg_weight);
        opt.step(&mut model.weights, &grad);
    }
    model.meta = super::TrainMeta {
        stage: hyper.stage,
        seed: hyper.seed,
        steps: init.meta.steps + hyper.steps as u64,
        final_lr: Some(opt.lr),
        provenance: init.meta.provenance.clone(),
    };
    Ok(model)
}
