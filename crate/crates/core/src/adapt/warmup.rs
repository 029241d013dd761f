use serde::{Deserialize, Serialize};

use super::paste::{augment_pseudo_labeled, build_g2, PasteParams};
use super::pseudo_label;
use crate::datamodel::{Dataset, DatasetItem, DomainTag};
use crate::detector::{fit, DetectorModel, FitHyper};
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::rng::{derive_seed, rng_for};
use crate::toyworld::make_intermediate_g1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StageKind {
    PretrainS,
    FtG1,
    FtG2,
    FtPlt,
    FtPltAug,
}

impl StageKind {
    fn is_pseudo_label(self) -> bool {
        matches!(self, StageKind::FtPlt | StageKind::FtPltAug)
    }
}

impl std::fmt::Display for StageKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StageKind::PretrainS => "PRETRAIN_S",
            StageKind::FtG1 => "FT_G1",
            StageKind::FtG2 => "FT_G2",
            StageKind::FtPlt => "FT_PLT",
            StageKind::FtPltAug => "FT_PLT_AUG",
        })
    }
}

/// Ordered warm-up schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WarmupPlan {
    pub stages: Vec<StageKind>,
    /// Maximum number of pseudo-labeling rounds.
    pub pl_rounds: usize,
    /// Permit `FT_PLT_AUG` before any `FT_PLT`.
    pub allow_reorder: bool,
    /// Style interpolation toward the target for G1.
    pub g1_alpha: f64,
    /// Chance that a G1 instance is carried into its G2 composite.
    pub g2_keep: f64,
    /// Composition of G2.
    pub paste: PasteParams,
    /// Augmentation of round-2 pseudo-labels.
    pub augment: PasteParams,
    pub confidence_floor: f64,
    pub nms_threshold: f64,
    pub pretrain: FitHyper,
    pub finetune: FitHyper,
}

impl Default for WarmupPlan {
    fn default() -> Self {
        Self {
            stages: vec![
                StageKind::PretrainS,
                StageKind::FtG1,
                StageKind::FtG2,
                StageKind::FtPlt,
                StageKind::FtPltAug,
            ],
            pl_rounds: 2,
            allow_reorder: false,
            g1_alpha: 0.7,
            g2_keep: 1.0,
            paste: PasteParams::default(),
            augment: PasteParams {
                max_paste_count: 2,
                ..PasteParams::default()
            },
            confidence_floor: 0.5,
            nms_threshold: 0.5,
            pretrain: FitHyper {
                steps: 1500,
                lr: Some(0.02),
                lr_decay: 0.1,
                ..FitHyper::default()
            },
            finetune: FitHyper {
                steps: 500,
                ..FitHyper::default()
            },
        }
    }
}

impl WarmupPlan {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.stages.first() != Some(&StageKind::PretrainS) {
            return cfg("warm-up plan must start with PRETRAIN_S".into());
        }
        if self.stages[1..].contains(&StageKind::PretrainS) {
            return cfg("PRETRAIN_S may appear only first".into());
        }
        if self.stages.len() > 5 {
            return cfg(format!("plan has {} stages; stage tags run FSOD-1 to FSOD-5", self.stages.len()));
        }
        if self.pl_rounds == 0 {
            return cfg("pl_rounds must be at least 1".into());
        }
        let rounds = self.stages.iter().filter(|s| s.is_pseudo_label()).count();
        if rounds > self.pl_rounds {
            return cfg(format!("plan runs {rounds} pseudo-label rounds, more than pl_rounds = {}", self.pl_rounds));
        }
        if !self.allow_reorder {
            let first_aug = self.stages.iter().position(|s| *s == StageKind::FtPltAug);
            let first_plt = self.stages.iter().position(|s| *s == StageKind::FtPlt);
            if let Some(a) = first_aug {
                if first_plt.is_none_or(|p| p > a) {
                    return cfg("FT_PLT_AUG needs an earlier FT_PLT (set allow_reorder to override)".into());
                }
            }
        }
        if !(0.0..=1.0).contains(&self.g1_alpha) || !(0.0..=1.0).contains(&self.confidence_floor) {
            return cfg("g1_alpha and confidence_floor must lie in [0, 1]".into());
        }
        self.paste.validate()?;
        self.augment.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()
    }

    /// Drop `FT_G2` (for targets whose backgrounds are not representative).
    pub fn without_g2(mut self) -> Self {
        self.stages.retain(|s| *s != StageKind::FtG2);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub tag: String,
    pub kind: StageKind,
    pub train_items: usize,
    /// Target images left out for lack of pseudo-labels.
    pub dropped: usize,
    pub instances: usize,
}

#[derive(Debug, Clone)]
pub struct WarmupOutput {
    /// `(FSOD-k, model)` in stage order.
    pub checkpoints: Vec<(String, DetectorModel)>,
    pub logs: Vec<StageLog>,
}

fn pseudo_labeled_set(
    model: &DetectorModel,
    target: &Dataset,
    plan: &WarmupPlan,
    augment: bool,
    seed: u64,
) -> Result<(Dataset, usize)> {
    let tag = if augment { DomainTag::Plt2Aug } else { DomainTag::Plt1 };
    let mut out = Dataset::new(tag, target.class_names.clone(), target.width, target.height);
    let mut dropped = 0;
    for (i, item) in target.items.iter().enumerate() {
        let weak = item
            .weak
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("target item {} has no weak label", item.name)))?;
        let dets = model.predict(&item.image, plan.confidence_floor, plan.nms_threshold)?;
        let pl = pseudo_label(&dets, weak, plan.confidence_floor);
        if pl.is_empty() {
            dropped += 1;
            continue;
        }
        let (image, full) = if augment {
            let mut rng = rng_for(seed, "pl-augment", i as u64);
            augment_pseudo_labeled(&item.image, &pl, &plan.augment, &mut rng)
        } else {
            (item.image.clone(), pl)
        };
        let mut new = DatasetItem::new(format!("pl_{}", item.name), image);
        new.full = Some(full);
        out.items.push(new);
    }
    Ok((out, dropped))
}

/// Run the plan, returning every stage's checkpoint.
pub fn run_warmup(
    plan: &WarmupPlan,
    source: &Dataset,
    target_train: &Dataset,
    backgrounds: &[RgbImage],
    detector_factory: &dyn Fn() -> Result<DetectorModel>,
    seed: u64,
) -> Result<WarmupOutput> {
    plan.validate()?;
    let target_style = target_train
        .style
        .as_ref()
        .ok_or_else(|| Error::invalid("target dataset carries no style parameters"))?;
    let mut g1: Option<Dataset> = None;
    let mut g2: Option<Dataset> = None;
    let mut model: Option<DetectorModel> = None;
    let mut out = WarmupOutput {
        checkpoints: Vec::new(),
        logs: Vec::new(),
    };
    for (idx, &kind) in plan.stages.iter().enumerate() {
        let tag = format!("FSOD-{}", idx + 1);
        let stage_seed = derive_seed(seed, "stage", idx as u64);
        let mut run = || -> Result<(DetectorModel, StageLog)> {
            let mut dropped = 0;
            let owned;
            let train: &Dataset = match kind {
                StageKind::PretrainS => source,
                StageKind::FtG1 => {
                    if g1.is_none() {
                        g1 = Some(make_intermediate_g1(source, target_style, plan.g1_alpha, seed)?);
                    }
                    g1.as_ref().expect("built")
                }
                StageKind::FtG2 => {
                    if g1.is_none() {
                        g1 = Some(make_intermediate_g1(source, target_style, plan.g1_alpha, seed)?);
                    }
                    if g2.is_none() {
                        let base = g1.as_ref().expect("built");
                        g2 = Some(build_g2(base, backgrounds, &plan.paste, plan.g2_keep, derive_seed(seed, "g2", 0))?);
                    }
                    g2.as_ref().expect("built")
                }
                StageKind::FtPlt | StageKind::FtPltAug => {
                    let current = model.as_ref().expect("pretraining ran first");
                    let (ds, d) =
                        pseudo_labeled_set(current, target_train, plan, kind == StageKind::FtPltAug, stage_seed)?;
                    dropped = d;
                    if dropped > 0 {
                        log::info!("{tag}: {dropped} target images without pseudo-labels left out");
                    }
                    owned = ds;
                    &owned
                }
            };
            if train.is_empty() {
                return Err(Error::invalid(format!("{kind} has no training images")));
            }
            let base = if kind == StageKind::PretrainS {
                plan.pretrain.clone()
            } else {
                plan.finetune.clone()
            };
            let hyper = FitHyper {
                stage: (idx + 1) as u8,
                seed: stage_seed,
                ..base
            };
            let init = match (kind, model.as_ref()) {
                (StageKind::PretrainS, _) | (_, None) => detector_factory()?,
                (_, Some(m)) => m.clone(),
            };
            log::info!("{tag} ({kind}): fitting on {} images", train.len());
            let trained = fit(&init, train, &hyper)?;
            let instances = train.items.iter().filter_map(|i| i.full.as_ref()).map(|f| f.len()).sum();
            Ok((
                trained,
                StageLog {
                    tag: tag.clone(),
                    kind,
                    train_items: train.len(),
                    dropped,
                    instances,
                },
            ))
        };
        let (trained, log_entry) = run().map_err(|e| e.in_stage(format!("{tag} ({kind})")))?;
        out.logs.push(log_entry);
        out.checkpoints.push((tag, trained.clone()));
        model = Some(trained);
    }
    Ok(out)
}
