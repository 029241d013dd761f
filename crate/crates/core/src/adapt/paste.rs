use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{ClassId, Dataset, DatasetItem, DomainTag, FullAnnotation, Instance};
use crate::error::{Error, Result};
use crate::geom::BoundingBox;
use crate::image::RgbImage;
use crate::rng::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PasteParams {
    pub resize_ratio_range: [f64; 2],
    pub allow_hflip: bool,
    pub allow_vflip: bool,
    /// Upper bound `L` on copies of one instance during augmentation.
    pub max_paste_count: usize,
    pub max_attempts: usize,
}

impl Default for PasteParams {
    fn default() -> Self {
        Self {
            resize_ratio_range: [0.8, 1.2],
            allow_hflip: true,
            allow_vflip: true,
            max_paste_count: 20,
            max_attempts: 50,
        }
    }
}

impl PasteParams {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.resize_ratio_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("resize ratio range [{lo}, {hi}] must satisfy 0 < lo <= hi")));
        }
        if self.max_attempts == 0 {
            return Err(Error::Config("max_attempts must be at least 1".into()));
        }
        Ok(())
    }
}

/// A foreground patch cropped tightly to its box.
#[derive(Debug, Clone, PartialEq)]
pub struct Donor {
    pub patch: RgbImage,
    pub class: ClassId,
}

/// Pixel-aligned crop of an instance.
pub fn crop_instance(image: &RgbImage, inst: &Instance) -> Option<Donor> {
    let b = inst.bbox;
    let x0 = b.x_min().round().max(0.0) as usize;
    let y0 = b.y_min().round().max(0.0) as usize;
    let x1 = (b.x_max().round() as usize).min(image.width());
    let y1 = (b.y_max().round() as usize).min(image.height());
    if x1 <= x0 || y1 <= y0 {
        return None;
    }
    let patch = image.crop(x0, y0, x1 - x0, y1 - y0).ok()?;
    Some(Donor { patch, class: inst.class })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PastedInstance {
    pub donor: usize,
    pub bbox: BoundingBox,
    pub hflip: bool,
    pub vflip: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PasteOutcome {
    pub image: RgbImage,
    pub annotation: FullAnnotation,
    pub pasted: Vec<PastedInstance>,
    /// Donors with no free position within the attempt budget.
    pub skipped: usize,
    /// Donors too large for the canvas even at the smallest ratio.
    pub too_large: usize,
}

/// Side length after resizing, kept within `[lo, hi] * len`.
fn resized_len(len: usize, ratio: f64, lo: f64, hi: f64) -> Option<usize> {
    let min = (len as f64 * lo).ceil().max(1.0) as usize;
    let max = (len as f64 * hi).floor() as usize;
    if min > max {
        return None;
    }
    Some(((len as f64 * ratio).round() as usize).clamp(min, max))
}

/// Paste donors onto `canvas` without overlapping `existing` or each other.
pub fn copy_paste_compose<R: Rng>(
    donors: &[Donor],
    canvas: &RgbImage,
    existing: &FullAnnotation,
    params: &PasteParams,
    rng: &mut R,
) -> PasteOutcome {
    let mut image = canvas.clone();
    let mut boxes: Vec<BoundingBox> = existing.instances.iter().map(|i| i.bbox).collect();
    let mut instances = existing.instances.clone();
    let mut pasted = Vec::new();
    let (mut skipped, mut too_large) = (0, 0);
    let [lo, hi] = params.resize_ratio_range;
    let (cw, ch) = (canvas.width(), canvas.height());
    for (k, donor) in donors.iter().enumerate() {
        let ratio = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let hflip = params.allow_hflip && rng.random_bool(0.5);
        let vflip = params.allow_vflip && rng.random_bool(0.5);
        let (Some(w), Some(h)) = (
            resized_len(donor.patch.width(), ratio, lo, hi),
            resized_len(donor.patch.height(), ratio, lo, hi),
        ) else {
            too_large += 1;
            continue;
        };
        if w > cw || h > ch {
            too_large += 1;
            continue;
        }
        let mut placed = None;
        for _ in 0..params.max_attempts {
            let x = rng.random_range(0..=cw - w);
            let y = rng.random_range(0..=ch - h);
            let b = BoundingBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64).expect("positive size");
            if boxes.iter().all(|o| o.iou(&b) == 0.0) {
                placed = Some((x, y, b));
                break;
            }
        }
        let Some((x, y, b)) = placed else {
            skipped += 1;
            continue;
        };
        let mut patch = donor.patch.resize_nearest(w, h);
        if hflip {
            patch = patch.flip_horizontal();
        }
        if vflip {
            patch = patch.flip_vertical();
        }
        image.paste(&patch, x, y).expect("placement lies inside the canvas");
        boxes.push(b);
        instances.push(Instance::new(b, donor.class));
        pasted.push(PastedInstance {
            donor: k,
            bbox: b,
            hflip,
            vflip,
        });
    }
    PasteOutcome {
        image,
        annotation: FullAnnotation::new(instances),
        pasted,
        skipped,
        too_large,
    }
}

/// Paste a random non-empty subset of each G1 item's instances onto a
/// random target background; each instance is kept with probability `keep`.
pub fn build_g2(g1: &Dataset, backgrounds: &[RgbImage], params: &PasteParams, keep: f64, seed: u64) -> Result<Dataset> {
    params.validate()?;
    if !(keep > 0.0 && keep <= 1.0) {
        return Err(Error::Config("G2 keep probability must lie in (0, 1]".into()));
    }
    if backgrounds.is_empty() {
        return Err(Error::invalid("copy-paste needs at least one background image"));
    }
    let mut out = Dataset::new(DomainTag::G2, g1.class_names.clone(), g1.width, g1.height);
    for (i, item) in g1.items.iter().enumerate() {
        let full = item
            .full
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("item {} is not fully annotated", item.name)))?;
        let mut rng = rng_for(seed, "g2", i as u64);
        let canvas = backgrounds.choose(&mut rng).expect("non-empty");
        if canvas.width() != g1.width || canvas.height() != g1.height {
            return Err(Error::invalid("background size differs from the dataset size"));
        }
        let mut chosen: Vec<&Instance> = full.instances.iter().filter(|_| rng.random_bool(keep)).collect();
        if chosen.is_empty() {
            if let Some(first) = full.instances.choose(&mut rng) {
                chosen.push(first);
            }
        }
        let donors: Vec<Donor> = chosen.iter().filter_map(|inst| crop_instance(&item.image, inst)).collect();
        let outcome = copy_paste_compose(&donors, canvas, &FullAnnotation::default(), params, &mut rng);
        let mut new = DatasetItem::new(format!("g2_{i:05}"), outcome.image);
        new.full = Some(outcome.annotation);
        out.items.push(new);
    }
    Ok(out)
}

/// Paste each pseudo-labeled instance `0..=L` extra times onto its own
/// image.
pub fn augment_pseudo_labeled<R: Rng>(
    image: &RgbImage,
    pl: &FullAnnotation,
    params: &PasteParams,
    rng: &mut R,
) -> (RgbImage, FullAnnotation) {
    let mut donors = Vec::new();
    for inst in &pl.instances {
        let copies = rng.random_range(0..=params.max_paste_count);
        if let Some(d) = crop_instance(image, inst) {
            donors.extend(std::iter::repeat_n(d, copies));
        }
    }
    if donors.is_empty() {
        return (image.clone(), pl.clone());
    }
    let out = copy_paste_compose(&donors, image, pl, params, rng);
    (out.image, out.annotation)
}
