//! Procedural dual-domain world: parametric shape scenes rendered under a
//! source or target style, and the geometry-preserving style shifter used to
//! build the first intermediate domain.

mod render;
mod style;

pub use render::{class_hue, render_scene, sample_scene, shape_of, SceneConfig, SceneSpec, Shape};
pub use style::{shift_style, StyleParams};

use serde::{Deserialize, Serialize};

use crate::datamodel::{weak_from_full, Dataset, DatasetItem, DomainTag};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_for};

/// One domain of the toy world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainConfig {
    pub style: StyleParams,
    pub scene: SceneConfig,
    pub train_count: usize,
    pub eval_count: usize,
}

/// Generator config for the whole world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub class_names: Vec<String>,
    pub width: usize,
    pub height: usize,
    pub source: DomainConfig,
    pub target: DomainConfig,
    /// Object-free target images used as copy-paste canvases.
    pub target_backgrounds: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        let class_names: Vec<String> = ["circle", "triangle", "rectangle", "ellipse", "diamond", "cross"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let c = class_names.len();
        Self {
            class_names,
            width: 128,
            height: 128,
            source: DomainConfig {
                style: StyleParams::source_default(c),
                scene: SceneConfig::default(),
                train_count: 160,
                eval_count: 0,
            },
            target: DomainConfig {
                style: StyleParams::target_default(c),
                scene: SceneConfig {
                    min_size: 12,
                    max_size: 26,
                    ..SceneConfig::default()
                },
                train_count: 160,
                eval_count: 80,
            },
            target_backgrounds: 40,
        }
    }
}

impl WorldConfig {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.num_classes();
        if c == 0 {
            return Err(Error::Config("world.class_names must not be empty".into()));
        }
        if self.width < 8 || self.height < 8 {
            return Err(Error::Config("world canvas must be at least 8x8".into()));
        }
        for (name, d) in [("source", &self.source), ("target", &self.target)] {
            d.style
                .validate()
                .map_err(|e| Error::Config(format!("world.{name}: {e}")))?;
            if d.style.shape_distortion.len() != c {
                return Err(Error::Config(format!(
                    "world.{name}.style.shape_distortion must have {c} entries"
                )));
            }
            d.scene
                .validate(c)
                .map_err(|e| Error::Config(format!("world.{name}: {e}")))?;
            if d.scene.max_size as usize >= self.width.min(self.height) {
                return Err(Error::Config(format!("world.{name}.scene.max_size exceeds canvas")));
            }
        }
        Ok(())
    }
}

/// Which side of the world to generate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

fn render_item(
    cfg: &WorldConfig,
    domain: &DomainConfig,
    stream: &str,
    index: usize,
    seed: u64,
) -> DatasetItem {
    let item_seed = derive_seed(seed, stream, index as u64);
    let mut rng = rng_for(item_seed, "layout", 0);
    let spec = sample_scene(
        &domain.scene,
        cfg.num_classes(),
        cfg.width,
        cfg.height,
        derive_seed(item_seed, "bg", 0),
        &mut rng,
    );
    let (image, ann) = render_scene(&spec, &domain.style, cfg.num_classes(), cfg.width, cfg.height, item_seed);
    let mut item = DatasetItem::new(format!("{stream}_{index:05}"), image);
    item.full = Some(ann);
    item.scene = Some(spec);
    item.render_seed = Some(item_seed);
    item
}

/// Generate the train and eval splits of one domain.
///
/// Source splits are fully annotated. The target train split carries weak
/// labels derived from its hidden truth; the target eval split carries only
/// hidden truth.
pub fn generate_domain(cfg: &WorldConfig, which: Domain, seed: u64) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let c = cfg.num_classes();
    let (domain, prefix) = match which {
        Domain::Source => (&cfg.source, "src"),
        Domain::Target => (&cfg.target, "tgt"),
    };
    let (train_tag, eval_tag) = match which {
        Domain::Source => (DomainTag::Source, DomainTag::Source),
        Domain::Target => (DomainTag::TargetTrain, DomainTag::TargetEval),
    };
    let mut train = Dataset::new(train_tag, cfg.class_names.clone(), cfg.width, cfg.height);
    let mut eval = Dataset::new(eval_tag, cfg.class_names.clone(), cfg.width, cfg.height);
    train.style = Some(domain.style.clone());
    eval.style = Some(domain.style.clone());

    for i in 0..domain.train_count {
        let mut item = render_item(cfg, domain, &format!("{prefix}_train"), i, seed);
        if which == Domain::Target {
            let truth = item.full.take().expect("rendered items are annotated");
            item.weak = Some(weak_from_full(&truth, c)?);
            item.hidden = Some(truth);
        }
        train.items.push(item);
    }
    for i in 0..domain.eval_count {
        let mut item = render_item(cfg, domain, &format!("{prefix}_eval"), i, seed);
        if which == Domain::Target {
            item.hidden = item.full.take();
        }
        eval.items.push(item);
    }
    train.validate()?;
    eval.validate()?;
    Ok((train, eval))
}

/// Object-free target-style images.
pub fn generate_target_backgrounds(cfg: &WorldConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut ds = Dataset::new(DomainTag::TargetBackground, cfg.class_names.clone(), cfg.width, cfg.height);
    ds.style = Some(cfg.target.style.clone());
    for i in 0..cfg.target_backgrounds {
        let item_seed = derive_seed(seed, "tgt_bg", i as u64);
        let spec = SceneSpec::empty(derive_seed(item_seed, "bg", 0));
        let (image, _) = render_scene(&spec, &cfg.target.style, cfg.num_classes(), cfg.width, cfg.height, item_seed);
        let mut item = DatasetItem::new(format!("tgt_bg_{i:05}"), image);
        item.scene = Some(spec);
        item.render_seed = Some(item_seed);
        ds.items.push(item);
    }
    Ok(ds)
}

/// All datasets of the toy world.
#[derive(Debug, Clone)]
pub struct World {
    pub source: Dataset,
    pub target_train: Dataset,
    pub target_eval: Dataset,
    pub target_backgrounds: Dataset,
}

pub fn generate_world(cfg: &WorldConfig, seed: u64) -> Result<World> {
    let (source, _) = generate_domain(cfg, Domain::Source, seed)?;
    let (target_train, target_eval) = generate_domain(cfg, Domain::Target, seed)?;
    let target_backgrounds = generate_target_backgrounds(cfg, seed)?;
    Ok(World {
        source,
        target_train,
        target_eval,
        target_backgrounds,
    })
}

/// Re-render every source scene under `shift_style(source, target, alpha)`,
/// copying annotations verbatim.
///
/// Items keep their render seed, so `alpha = 0` reproduces the source images
/// bit for bit; `seed` only seeds items that were stored without one.
pub fn make_intermediate_g1(source: &Dataset, target_style: &StyleParams, alpha: f64, seed: u64) -> Result<Dataset> {
    let src_style = source
        .style
        .as_ref()
        .ok_or_else(|| Error::invalid("source dataset has no style parameters"))?;
    let style = shift_style(src_style, target_style, alpha)?;
    let mut g1 = Dataset::new(DomainTag::G1, source.class_names.clone(), source.width, source.height);
    for (i, item) in source.items.iter().enumerate() {
        let spec = item
            .scene
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("source item {} has no scene spec", item.name)))?;
        let full = item
            .full
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("source item {} is not fully annotated", item.name)))?;
        let render_seed = item.render_seed.unwrap_or_else(|| derive_seed(seed, "g1", i as u64));
        let (image, _) = render_scene(spec, &style, source.num_classes(), source.width, source.height, render_seed);
        let mut out = DatasetItem::new(format!("g1_{}", item.name), image);
        out.full = Some(full.clone());
        out.scene = Some(spec.clone());
        out.render_seed = Some(render_seed);
        g1.items.push(out);
    }
    g1.style = Some(style);
    Ok(g1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::ClassId;
    use std::collections::HashSet;

    fn small() -> WorldConfig {
        let mut cfg = WorldConfig::default();
        cfg.source.train_count = 6;
        cfg.target.train_count = 5;
        cfg.target.eval_count = 3;
        cfg.target_backgrounds = 2;
        cfg.width = 64;
        cfg.height = 64;
        cfg
    }

    #[test]
    fn zero_target_images() {
        let mut cfg = small();
        cfg.target.train_count = 0;
        cfg.target.eval_count = 0;
        let (t, e) = generate_domain(&cfg, Domain::Target, 1).unwrap();
        assert!(t.is_empty() && e.is_empty());
    }

    #[test]
    fn target_weak_labels_match_hidden_truth() {
        let (t, e) = generate_domain(&small(), Domain::Target, 2).unwrap();
        for item in &t.items {
            let hidden = item.hidden.as_ref().unwrap();
            assert_eq!(item.weak.as_ref().unwrap(), &weak_from_full(hidden, 6).unwrap());
            assert!(item.full.is_none());
        }
        assert!(e.items.iter().all(|i| i.hidden.is_some() && i.weak.is_none()));
    }

    #[test]
    fn rendered_annotation_equals_spec() {
        let (s, _) = generate_domain(&small(), Domain::Source, 3).unwrap();
        for item in &s.items {
            assert_eq!(item.full.as_ref().unwrap().instances, item.scene.as_ref().unwrap().placements);
        }
    }

    #[test]
    fn g1_transfers_labels() {
        let cfg = small();
        let (s, _) = generate_domain(&cfg, Domain::Source, 4).unwrap();
        let g1 = make_intermediate_g1(&s, &cfg.target.style, 0.7, 0).unwrap();
        assert_eq!(g1.tag, DomainTag::G1);
        for (a, b) in s.items.iter().zip(&g1.items) {
            assert_eq!(a.full, b.full);
            assert_ne!(a.image, b.image);
        }

        let same = make_intermediate_g1(&s, &cfg.target.style, 0.0, 0).unwrap();
        for (a, b) in s.items.iter().zip(&same.items) {
            assert_eq!(a.image, b.image);
        }

        let full = make_intermediate_g1(&s, &cfg.target.style, 1.0, 0).unwrap();
        assert_eq!(full.style.as_ref(), Some(&cfg.target.style));
    }

    #[test]
    fn g1_requires_scene_specs() {
        let (mut s, _) = generate_domain(&small(), Domain::Source, 4).unwrap();
        s.items[0].scene = None;
        assert!(make_intermediate_g1(&s, &StyleParams::target_default(6), 0.5, 0).is_err());
    }

    #[test]
    fn distinct_seeds_distinct_scenes() {
        let mut cfg = small();
        cfg.source.train_count = 1;
        let mut seen = HashSet::new();
        for seed in 0..100 {
            let (s, _) = generate_domain(&cfg, Domain::Source, seed).unwrap();
            seen.insert(s.items[0].image.clone());
        }
        assert_eq!(seen.len(), 100);
    }

    #[test]
    fn class_histogram_matches_mixture() {
        // Binomial check on 1000 sparse scenes: every class frequency within
        // 4.5 standard deviations of its configured probability.
        let mut cfg = WorldConfig::default();
        cfg.source.scene.class_weights = vec![4.0, 1.0, 1.0, 2.0, 1.0, 1.0];
        cfg.source.scene.max_instances = 3;
        let probs = cfg.source.scene.class_probabilities(6);
        let mut counts = [0usize; 6];
        let mut total = 0usize;
        let mut rng = rng_for(11, "hist", 0);
        for _ in 0..1000 {
            let s = sample_scene(&cfg.source.scene, 6, 128, 128, 0, &mut rng);
            for p in &s.placements {
                counts[p.class.index()] += 1;
                total += 1;
            }
        }
        for c in 0..6 {
            let p = probs[c];
            let mean = total as f64 * p;
            let sd = (total as f64 * p * (1.0 - p)).sqrt();
            let z = (counts[c] as f64 - mean) / sd;
            assert!(z.abs() < 4.5, "class {} z = {z}", ClassId::from_index(c));
        }
    }
}
