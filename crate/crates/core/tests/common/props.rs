//! Randomized invariant suites. Each returns `Err` with the shrunk failing
//! case.

use dualweak::adapt::{copy_paste_compose, pseudo_label, Donor, PasteParams};
use dualweak::datamodel::{ClassId, Detection, FullAnnotation, Instance, WeakAnnotation};
use dualweak::detector::ClassDetections;
use dualweak::eval::{average_precision, ApMode};
use dualweak::geom::{greedy_match, nms, BoundingBox};
use dualweak::image::RgbImage;
use dualweak::wsod::{aggregate, consistency_loss, oicr_assign, wsddn_forward};
use ndarray::{Array2, Axis};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::SeedableRng;

pub fn run<S: Strategy>(cases: u32, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String> {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

pub fn bbox() -> impl Strategy<Value = BoundingBox> {
    (0.0..100.0f64, 0.0..100.0f64, 0.5..40.0f64, 0.5..40.0f64)
        .prop_map(|(x, y, w, h)| BoundingBox::new(x, y, x + w, y + h).unwrap())
}

/// Boxes on a coarse lattice, so exact overlaps and ties are common.
pub fn lattice_bbox() -> impl Strategy<Value = BoundingBox> {
    (0u8..8, 0u8..8, 1u8..5, 1u8..5).prop_map(|(x, y, w, h)| {
        let (x, y) = (x as f64 * 4.0, y as f64 * 4.0);
        BoundingBox::new(x, y, x + w as f64 * 4.0, y + h as f64 * 4.0).unwrap()
    })
}

pub fn detection(classes: u32) -> impl Strategy<Value = Detection> {
    (lattice_bbox(), 1..=classes, 0.0..=1.0f64).prop_map(|(b, c, s)| Detection::new(b, ClassId::new(c), s).unwrap())
}

pub fn annotation(classes: u32, max: usize) -> impl Strategy<Value = FullAnnotation> {
    proptest::collection::vec((lattice_bbox(), 1..=classes), 0..=max)
        .prop_map(|v| FullAnnotation::new(v.into_iter().map(|(b, c)| Instance::new(b, ClassId::new(c))).collect()))
}

fn sorted(mut d: Vec<Detection>) -> Vec<Detection> {
    d.sort_by(|a, b| b.score.total_cmp(&a.score));
    d
}

pub fn iou(cases: u32) -> Result<(), String> {
    run(cases, (bbox(), bbox()), |(a, b)| {
        let ab = a.iou(&b);
        prop_assert_eq!(ab, b.iou(&a));
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((a.iou(&a) - 1.0).abs() < 1e-12);
        Ok(())
    })
}

pub fn nms_subset_and_idempotent(cases: u32) -> Result<(), String> {
    run(cases, (proptest::collection::vec(detection(3), 0..14), 0.0..=1.0f64), |(dets, thr)| {
        let kept = nms(&dets, thr).unwrap();
        prop_assert!(kept.len() <= dets.len());
        for k in &kept {
            prop_assert!(dets.contains(k));
        }
        prop_assert!(kept.windows(2).all(|w| w[0].score >= w[1].score));
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!(a.class != b.class || a.bbox.iou(&b.bbox) <= thr);
            }
        }
        prop_assert_eq!(nms(&kept, thr).unwrap(), kept);
        Ok(())
    })
}

pub fn matching(cases: u32) -> Result<(), String> {
    let s = (
        proptest::collection::vec(detection(2), 0..10),
        annotation(2, 6),
        0.0..0.9f64,
        any::<bool>(),
    );
    run(cases, s, |(dets, gts, thr, aware)| {
        let dets = sorted(dets);
        let m = greedy_match(&dets, &gts, thr, aware).unwrap();
        prop_assert!(m.pairs.len() <= dets.len().min(gts.len()));
        let mut seen_d = vec![false; dets.len()];
        let mut seen_g = vec![false; gts.len()];
        for &(d, g) in &m.pairs {
            prop_assert!(dets[d].bbox.iou(&gts.instances[g].bbox) > thr);
            prop_assert!(!aware || dets[d].class == gts.instances[g].class);
            prop_assert!(!seen_d[d] && !seen_g[g]);
            seen_d[d] = true;
            seen_g[g] = true;
        }
        prop_assert_eq!(m.pairs.len() + m.unmatched_dets.len(), dets.len());
        prop_assert_eq!(m.pairs.len() + m.unmatched_gts.len(), gts.len());
        Ok(())
    })
}

fn logits() -> impl Strategy<Value = (Array2<f64>, Array2<f64>)> {
    (1usize..12, 1usize..6).prop_flat_map(|(m, c)| {
        (
            proptest::collection::vec(-30.0..30.0f64, m * c),
            proptest::collection::vec(-30.0..30.0f64, m * c),
        )
            .prop_map(move |(a, b)| {
                (
                    Array2::from_shape_vec((m, c), a).unwrap(),
                    Array2::from_shape_vec((m, c), b).unwrap(),
                )
            })
    })
}

pub fn softmax_streams(cases: u32) -> Result<(), String> {
    run(cases, logits(), |(xc, xd)| {
        let s = wsddn_forward(&xc, &xd).unwrap();
        for row in s.s_cls.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|v| *v >= 0.0));
        }
        for col in s.s_det.columns() {
            prop_assert!((col.sum() - 1.0).abs() < 1e-12);
            prop_assert!(col.iter().all(|v| *v >= 0.0));
        }
        prop_assert!(s.p.iter().all(|p| (0.0..=1.0).contains(p)));
        let sums = s.x0.sum_axis(Axis(0));
        for (p, q) in s.p.iter().zip(&sums) {
            prop_assert_eq!(*p, q.min(1.0));
        }
        Ok(())
    })
}

fn assign_case() -> impl Strategy<Value = (Array2<f64>, Vec<BoundingBox>, WeakAnnotation)> {
    (1usize..10, 1usize..5).prop_flat_map(|(m, c)| {
        (
            proptest::collection::vec(0.0..=1.0f64, m * c),
            proptest::collection::vec(lattice_bbox(), m),
            proptest::collection::vec(any::<bool>(), c),
        )
            .prop_map(move |(p, b, w)| (Array2::from_shape_vec((m, c), p).unwrap(), b, WeakAnnotation::new(w)))
    })
}

pub fn oicr_partition(cases: u32) -> Result<(), String> {
    run(cases, assign_case(), |(prev, boxes, weak)| {
        let c = weak.num_classes();
        let a = oicr_assign(prev.view(), &boxes, &weak, 0.5);
        prop_assert_eq!(a.labels.len(), boxes.len());
        prop_assert_eq!(a.weights.len(), boxes.len());
        prop_assert_eq!(a.seeds.len(), weak.count());
        for &(j, s) in &a.seeds {
            prop_assert!(a.seeds.iter().any(|&(k, t)| t == s && a.labels[s] == k));
            prop_assert!(weak.as_slice()[j]);
        }
        for (i, &l) in a.labels.iter().enumerate() {
            prop_assert!(l <= c);
            prop_assert!(l == c || weak.as_slice()[l]);
            prop_assert!((0.0..=1.0).contains(&a.weights[i]));
            prop_assert_eq!(a.seed_boxes[i].is_some(), l < c);
        }
        Ok(())
    })
}

fn patch(w: usize, h: usize, tint: u8) -> RgbImage {
    let mut p = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            p.put(x, y, [tint, (x * 9) as u8, (y * 13) as u8]);
        }
    }
    p
}

pub fn copy_paste(cases: u32) -> Result<(), String> {
    let s = (
        24usize..64,
        24usize..64,
        proptest::collection::vec((1usize..24, 1usize..24), 1..8),
        proptest::option::of(lattice_bbox()),
        any::<u64>(),
        any::<bool>(),
    );
    run(cases, s, |(cw, ch, sizes, existing, seed, flips)| {
        let canvas = RgbImage::filled(cw, ch, [10, 20, 30]);
        let donors: Vec<Donor> = sizes
            .iter()
            .enumerate()
            .map(|(k, &(w, h))| Donor {
                patch: patch(w, h, k as u8),
                class: ClassId::new(1 + k as u32 % 3),
            })
            .collect();
        let existing = FullAnnotation::new(
            existing
                .filter(|b| b.x_max() <= cw as f64 && b.y_max() <= ch as f64)
                .map(|b| vec![Instance::new(b, ClassId::new(1))])
                .unwrap_or_default(),
        );
        let params = PasteParams {
            allow_hflip: flips,
            allow_vflip: flips,
            ..PasteParams::default()
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let out = copy_paste_compose(&donors, &canvas, &existing, &params, &mut rng);
        prop_assert_eq!(out.pasted.len() + out.skipped + out.too_large, donors.len());
        prop_assert_eq!(out.annotation.len(), existing.len() + out.pasted.len());
        let boxes: Vec<BoundingBox> = out.annotation.instances.iter().map(|i| i.bbox).collect();
        for (i, a) in boxes.iter().enumerate() {
            for b in &boxes[i + 1..] {
                prop_assert_eq!(a.iou(b), 0.0);
            }
        }
        for p in &out.pasted {
            let d = &donors[p.donor].patch;
            let rw = p.bbox.width() / d.width() as f64;
            let rh = p.bbox.height() / d.height() as f64;
            prop_assert!((0.8..=1.2).contains(&rw) && (0.8..=1.2).contains(&rh), "ratios {} {}", rw, rh);
            prop_assert!(p.bbox.x_min() >= 0.0 && p.bbox.y_min() >= 0.0);
            prop_assert!(p.bbox.x_max() <= cw as f64 && p.bbox.y_max() <= ch as f64);
        }
        Ok(())
    })
}

fn class_detections() -> impl Strategy<Value = (ClassDetections, WeakAnnotation, f64)> {
    (1usize..6).prop_flat_map(|c| {
        (
            proptest::collection::vec(proptest::collection::vec((lattice_bbox(), 0.0..=1.0f64), 0..5), c),
            proptest::collection::vec(any::<bool>(), c),
            0.0..=1.0f64,
        )
            .prop_map(|(per, weak, floor)| {
                let per_class = per
                    .into_iter()
                    .enumerate()
                    .map(|(j, v)| {
                        sorted(
                            v.into_iter()
                                .map(|(b, s)| Detection::new(b, ClassId::from_index(j), s).unwrap())
                                .collect(),
                        )
                    })
                    .collect();
                (ClassDetections { per_class }, WeakAnnotation::new(weak), floor)
            })
    })
}

pub fn pseudo_label_soundness(cases: u32) -> Result<(), String> {
    run(cases, class_detections(), |(dets, weak, floor)| {
        let pl = pseudo_label(&dets, &weak, floor);
        let mut seen = vec![false; weak.num_classes()];
        for inst in &pl.instances {
            let j = inst.class.index();
            prop_assert!(weak.as_slice()[j]);
            prop_assert!(!seen[j]);
            seen[j] = true;
            let best = dets.per_class[j].iter().map(|d| d.score).fold(f64::MIN, f64::max);
            prop_assert!(best >= floor);
            prop_assert!(dets.per_class[j].iter().any(|d| d.bbox == inst.bbox && d.score == best));
        }
        for (j, &y) in weak.as_slice().iter().enumerate() {
            let eligible = y && dets.per_class[j].iter().any(|d| d.score >= floor);
            prop_assert_eq!(seen[j], eligible);
        }
        Ok(())
    })
}

pub fn attention_aggregate(cases: u32) -> Result<(), String> {
    let s = (1usize..5, 1usize..10).prop_flat_map(|(m, n)| {
        (
            proptest::collection::vec(proptest::collection::vec(0.0..=1.0f64, n), m),
            any::<bool>(),
        )
    });
    run(cases, s, |(mut members, make_equal)| {
        if make_equal {
            let first = members[0].clone();
            members.iter_mut().for_each(|m| *m = first.clone());
        }
        let t = aggregate(&members);
        for m in &members {
            prop_assert!(m.iter().zip(&t).all(|(a, b)| b >= a));
        }
        let (loss, _, _) = consistency_loss(&members);
        let all_equal = members.iter().all(|m| *m == members[0]);
        prop_assert_eq!(loss == 0.0, all_equal);
        Ok(())
    })
}

pub fn ap_monotone_invariance(cases: u32) -> Result<(), String> {
    let s = (
        proptest::collection::vec(proptest::collection::vec(detection(1), 0..4), 1..4),
        proptest::collection::vec(annotation(1, 3), 3),
        0usize..3,
    );
    run(cases, s, |(dets, gts, f)| {
        let gts = gts[..dets.len()].to_vec();
        let transform = |s: f64| match f {
            0 => s * s * 0.5,
            1 => (s * 3.0).exp() / 30.0,
            _ => 0.25 + s / 2.0,
        };
        let moved: Vec<Vec<Detection>> = dets
            .iter()
            .map(|v| {
                v.iter()
                    .map(|d| Detection::new(d.bbox, d.class, transform(d.score).min(1.0)).unwrap())
                    .collect()
            })
            .collect();
        for mode in [ApMode::AllPoint, ApMode::ElevenPoint] {
            let a = average_precision(&dets, &gts, ClassId::new(1), 0.5, mode).unwrap();
            let b = average_precision(&moved, &gts, ClassId::new(1), 0.5, mode).unwrap();
            prop_assert_eq!(a, b);
        }
        Ok(())
    })
}

/// Every suite in criterion order, by name.
pub fn all() -> Vec<(&'static str, fn(u32) -> Result<(), String>)> {
    vec![
        ("iou", iou),
        ("nms", nms_subset_and_idempotent),
        ("matching", matching),
        ("softmax streams", softmax_streams),
        ("oicr partition", oicr_partition),
        ("copy-paste", copy_paste),
        ("pseudo-label", pseudo_label_soundness),
        ("attention aggregate", attention_aggregate),
        ("AP monotone invariance", ap_monotone_invariance),
    ]
}
