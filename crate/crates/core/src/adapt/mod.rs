//! Warm-up domain adaptation: copy-paste composition, pseudo-labeling and
//! the progressive fine-tuning schedule.

mod paste;
mod warmup;

pub use paste::{augment_pseudo_labeled, build_g2, copy_paste_compose, crop_instance, Donor, PasteOutcome, PasteParams, PastedInstance};
pub use warmup::{run_warmup, StageKind, StageLog, WarmupOutput, WarmupPlan};

use crate::datamodel::{FullAnnotation, Instance, WeakAnnotation};
use crate::detector::ClassDetections;

/// Top-1 prediction of every present class whose best score reaches
/// `confidence_floor`.
pub fn pseudo_label(dets: &ClassDetections, weak: &WeakAnnotation, confidence_floor: f64) -> FullAnnotation {
    let mut out = Vec::new();
    for c in weak.present_classes() {
        if c.index() >= dets.num_classes() {
            continue;
        }
        let best = dets
            .class(c)
            .iter()
            .filter(|d| d.class == c)
            .fold(None::<&crate::datamodel::Detection>, |acc, d| match acc {
                Some(a) if a.score >= d.score => Some(a),
                _ => Some(d),
            });
        if let Some(d) = best {
            if d.score >= confidence_floor {
                out.push(Instance::new(d.bbox, c));
            }
        }
    }
    FullAnnotation::new(out)
}
