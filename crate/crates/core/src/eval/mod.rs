//! VOC-style average precision and a TIDE-style error breakdown.

pub mod report;

use serde::{Deserialize, Serialize};

use crate::datamodel::{ClassId, Detection, FullAnnotation, Instance};
use crate::error::{Error, Result};
use crate::geom::greedy_match;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApMode {
    #[serde(rename = "11-point")]
    ElevenPoint,
    AllPoint,
}

impl std::fmt::Display for ApMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ApMode::ElevenPoint => "11-point",
            ApMode::AllPoint => "all-point",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    /// `None` for classes without ground truth.
    pub per_class: Vec<Option<f64>>,
    pub map: f64,
    pub mode: ApMode,
    pub iou_threshold: f64,
}

/// Interpolated area under a precision/recall sequence listed in
/// descending-score order.
pub fn interpolated_ap(recall: &[f64], precision: &[f64], mode: ApMode) -> f64 {
    match mode {
        ApMode::AllPoint => {
            let mut mrec = Vec::with_capacity(recall.len() + 2);
            let mut mpre = Vec::with_capacity(recall.len() + 2);
            mrec.push(0.0);
            mpre.push(0.0);
            mrec.extend_from_slice(recall);
            mpre.extend_from_slice(precision);
            mrec.push(1.0);
            mpre.push(0.0);
            for i in (0..mpre.len() - 1).rev() {
                mpre[i] = mpre[i].max(mpre[i + 1]);
            }
            (1..mrec.len())
                .filter(|&i| mrec[i] != mrec[i - 1])
                .map(|i| (mrec[i] - mrec[i - 1]) * mpre[i])
                .sum()
        }
        ApMode::ElevenPoint => {
            let mut total = 0.0;
            for k in 0..=10 {
                let t = k as f64 / 10.0;
                let p = recall
                    .iter()
                    .zip(precision)
                    .filter(|(r, _)| **r >= t)
                    .map(|(_, p)| *p)
                    .fold(0.0, f64::max);
                total += p;
            }
            total / 11.0
        }
    }
}

fn class_gts(gts: &FullAnnotation, class: ClassId) -> FullAnnotation {
    FullAnnotation::new(gts.instances.iter().filter(|g| g.class == class).copied().collect::<Vec<Instance>>())
}

/// AP of one class over a set of images; `None` when the class has no
/// ground truth.
pub fn average_precision(
    dets: &[Vec<Detection>],
    gts: &[FullAnnotation],
    class: ClassId,
    iou_threshold: f64,
    mode: ApMode,
) -> Result<Option<f64>> {
    if dets.len() != gts.len() {
        return Err(Error::invalid(format!("{} detection lists for {} images", dets.len(), gts.len())));
    }
    let mut npos = 0usize;
    // (score, image, rank within image, is true positive)
    let mut scored: Vec<(f64, usize, usize, bool)> = Vec::new();
    for (img, (d, g)) in dets.iter().zip(gts).enumerate() {
        let g = class_gts(g, class);
        npos += g.len();
        let mut mine: Vec<Detection> = d.iter().filter(|x| x.class == class).copied().collect();
        mine.sort_by(|a, b| b.score.total_cmp(&a.score));
        let m = greedy_match(&mine, &g, iou_threshold, true)?;
        let mut tp = vec![false; mine.len()];
        for (di, _) in m.pairs {
            tp[di] = true;
        }
        scored.extend(mine.iter().enumerate().map(|(r, x)| (x.score, img, r, tp[r])));
    }
    if npos == 0 {
        return Ok(None);
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::with_capacity(scored.len());
    let mut precision = Vec::with_capacity(scored.len());
    for &(_, _, _, hit) in &scored {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / npos as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    Ok(Some(interpolated_ap(&recall, &precision, mode)))
}

/// Mean over defined APs.
pub fn mean_ap(per_class: &[Option<f64>]) -> Result<f64> {
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::invalid("mAP undefined: no class has ground truth"));
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

pub fn evaluate_ap(
    dets: &[Vec<Detection>],
    gts: &[FullAnnotation],
    num_classes: usize,
    iou_threshold: f64,
    mode: ApMode,
) -> Result<ApResult> {
    let per_class = (0..num_classes)
        .map(|j| average_precision(dets, gts, ClassId::from_index(j), iou_threshold, mode))
        .collect::<Result<Vec<_>>>()?;
    let map = mean_ap(&per_class)?;
    Ok(ApResult {
        per_class,
        map,
        mode,
        iou_threshold,
    })
}

/// Detection outcome counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBreakdown {
    pub correct: usize,
    pub classification: usize,
    pub localization: usize,
    pub both: usize,
    pub duplicate: usize,
    pub background: usize,
    pub missed: usize,
}

impl ErrorBreakdown {
    pub fn detections(&self) -> usize {
        self.correct + self.classification + self.localization + self.both + self.duplicate + self.background
    }

    pub fn errors(&self) -> [(&'static str, usize); 6] {
        [
            ("classification", self.classification),
            ("localization", self.localization),
            ("both", self.both),
            ("duplicate", self.duplicate),
            ("background", self.background),
            ("missed", self.missed),
        ]
    }

    pub fn add(&mut self, o: &ErrorBreakdown) {
        self.correct += o.correct;
        self.classification += o.classification;
        self.localization += o.localization;
        self.both += o.both;
        self.duplicate += o.duplicate;
        self.background += o.background;
        self.missed += o.missed;
    }
}

/// Classify each detection of one image, in score order.
pub fn tide_decompose(dets: &[Detection], gts: &FullAnnotation, fg_iou: f64, bg_iou: f64) -> Result<ErrorBreakdown> {
    if dets.windows(2).any(|w| w[0].score < w[1].score) {
        return Err(Error::invalid("detections must be sorted by descending score"));
    }
    let mut matched = vec![false; gts.len()];
    let mut out = ErrorBreakdown::default();
    for d in dets {
        let ious: Vec<f64> = gts.instances.iter().map(|g| d.bbox.iou(&g.bbox)).collect();
        let best_same_free = (0..gts.len())
            .filter(|&g| gts.instances[g].class == d.class && !matched[g] && ious[g] >= fg_iou)
            .max_by(|&a, &b| ious[a].total_cmp(&ious[b]).then(b.cmp(&a)));
        if let Some(g) = best_same_free {
            matched[g] = true;
            out.correct += 1;
            continue;
        }
        let same = |g: usize| gts.instances[g].class == d.class;
        let max_where = |pred: &dyn Fn(usize) -> bool| {
            (0..gts.len()).filter(|&g| pred(g)).map(|g| ious[g]).fold(0.0, f64::max)
        };
        let same_max = max_where(&same);
        let other_max = max_where(&|g| !same(g));
        if same_max >= fg_iou {
            out.duplicate += 1;
        } else if other_max >= fg_iou {
            out.classification += 1;
        } else if same_max >= bg_iou {
            out.localization += 1;
        } else if other_max >= bg_iou {
            out.both += 1;
        } else {
            out.background += 1;
        }
    }
    out.missed = matched.iter().filter(|m| !**m).count();
    Ok(out)
}

/// Breakdown summed over images; detections below `score_threshold` are
/// ignored.
pub fn tide_dataset(
    dets: &[Vec<Detection>],
    gts: &[FullAnnotation],
    score_threshold: f64,
    fg_iou: f64,
    bg_iou: f64,
) -> Result<ErrorBreakdown> {
    if dets.len() != gts.len() {
        return Err(Error::invalid(format!("{} detection lists for {} images", dets.len(), gts.len())));
    }
    let mut total = ErrorBreakdown::default();
    for (d, g) in dets.iter().zip(gts) {
        let mut kept: Vec<Detection> = d.iter().filter(|x| x.score >= score_threshold).copied().collect();
        kept.sort_by(|a, b| b.score.total_cmp(&a.score));
        total.add(&tide_decompose(&kept, g, fg_iou, bg_iou)?);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::BoundingBox;

    fn bb(a: f64, b: f64, c: f64, d: f64) -> BoundingBox {
        BoundingBox::new(a, b, c, d).unwrap()
    }

    fn det(b: BoundingBox, c: u32, s: f64) -> Detection {
        Detection::new(b, ClassId::new(c), s).unwrap()
    }

    fn gt(list: &[(BoundingBox, u32)]) -> FullAnnotation {
        FullAnnotation::new(list.iter().map(|(b, c)| Instance::new(*b, ClassId::new(*c))).collect())
    }

    #[test]
    fn perfect_single_detection() {
        let b = bb(0.0, 0.0, 10.0, 10.0);
        for mode in [ApMode::AllPoint, ApMode::ElevenPoint] {
            let ap = average_precision(&[vec![det(b, 1, 0.9)]], &[gt(&[(b, 1)])], ClassId::new(1), 0.5, mode).unwrap();
            assert_eq!(ap, Some(1.0));
        }
    }

    #[test]
    fn no_detections_give_zero() {
        let b = bb(0.0, 0.0, 10.0, 10.0);
        let ap = average_precision(&[vec![]], &[gt(&[(b, 1)])], ClassId::new(1), 0.5, ApMode::AllPoint).unwrap();
        assert_eq!(ap, Some(0.0));
    }

    #[test]
    fn hit_then_miss_with_two_gts() {
        let g1 = bb(0.0, 0.0, 10.0, 10.0);
        let g2 = bb(50.0, 50.0, 60.0, 60.0);
        let dets = vec![vec![det(g1, 1, 0.9), det(bb(20.0, 20.0, 30.0, 30.0), 1, 0.8)]];
        let gts = [gt(&[(g1, 1), (g2, 1)])];
        let all = average_precision(&dets, &gts, ClassId::new(1), 0.5, ApMode::AllPoint).unwrap();
        assert_eq!(all, Some(0.5));
        let eleven = average_precision(&dets, &gts, ClassId::new(1), 0.5, ApMode::ElevenPoint).unwrap();
        assert!((eleven.unwrap() - 6.0 / 11.0).abs() < 1e-15);
    }

    #[test]
    fn class_without_gt_is_absent() {
        let b = bb(0.0, 0.0, 10.0, 10.0);
        let r = evaluate_ap(&[vec![det(b, 2, 0.9)]], &[gt(&[(b, 1)])], 2, 0.5, ApMode::AllPoint).unwrap();
        assert_eq!(r.per_class, vec![Some(0.0), None]);
        assert_eq!(r.map, 0.0);
    }

    #[test]
    fn map_arithmetic() {
        assert_eq!(mean_ap(&[Some(0.7)]).unwrap(), 0.7);
        assert_eq!(mean_ap(&[Some(1.0), Some(0.0)]).unwrap(), 0.5);
        assert!(mean_ap(&[None, None]).is_err());
    }

    #[test]
    fn tide_fixtures() {
        let g = bb(0.0, 0.0, 10.0, 10.0);
        let perfect = tide_decompose(&[det(g, 1, 0.9)], &gt(&[(g, 1)]), 0.5, 0.1).unwrap();
        assert_eq!(
            perfect,
            ErrorBreakdown {
                correct: 1,
                ..Default::default()
            }
        );
        let far = tide_decompose(&[det(bb(50.0, 50.0, 60.0, 60.0), 1, 0.9)], &gt(&[(g, 1)]), 0.5, 0.1).unwrap();
        assert_eq!(far.background, 1);
        assert_eq!(far.missed, 1);
        // IoU = 30 / 100 with a box sharing the gt's corner
        let loc = det(bb(0.0, 0.0, 10.0, 3.0), 1, 0.9);
        assert!((loc.bbox.iou(&g) - 0.3).abs() < 1e-12);
        let r = tide_decompose(&[loc], &gt(&[(g, 1)]), 0.5, 0.1).unwrap();
        assert_eq!(r.localization, 1);
        let r = tide_decompose(&[det(g, 2, 0.9)], &gt(&[(g, 1)]), 0.5, 0.1).unwrap();
        assert_eq!(r.classification, 1);
        let r = tide_decompose(&[det(bb(0.0, 0.0, 10.0, 3.0), 2, 0.9)], &gt(&[(g, 1)]), 0.5, 0.1).unwrap();
        assert_eq!(r.both, 1);
        let r = tide_decompose(&[det(g, 1, 0.9), det(g, 1, 0.8)], &gt(&[(g, 1)]), 0.5, 0.1).unwrap();
        assert_eq!((r.correct, r.duplicate, r.missed), (1, 1, 0));
    }
}
