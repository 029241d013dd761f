//! Independent reference computations for the evaluation code.

use dualweak::datamodel::{ClassId, Detection, FullAnnotation, Instance};
use dualweak::eval::{average_precision, tide_dataset, ApMode};
use dualweak::geom::BoundingBox;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn overlap(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let w = (a.x_max().min(b.x_max()) - a.x_min().max(b.x_min())).max(0.0);
    let h = (a.y_max().min(b.y_max()) - a.y_min().max(b.y_min())).max(0.0);
    let inter = w * h;
    let area = |r: &BoundingBox| (r.x_max() - r.x_min()) * (r.y_max() - r.y_min());
    inter / (area(a) + area(b) - inter)
}

/// True positives among the `k` highest-scoring detections of one class.
fn hits_at(ranked: &[(f64, usize, Detection)], gts: &[FullAnnotation], class: ClassId, iou: f64) -> usize {
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut hits = 0;
    for (_, img, d) in ranked {
        let mut best = None;
        let mut best_iou = iou;
        for (gi, g) in gts[*img].instances.iter().enumerate() {
            if g.class != class || taken[*img][gi] {
                continue;
            }
            let o = overlap(&d.bbox, &g.bbox);
            if o > best_iou {
                best_iou = o;
                best = Some(gi);
            }
        }
        if let Some(gi) = best {
            taken[*img][gi] = true;
            hits += 1;
        }
    }
    hits
}

/// AP recomputed cutoff by cutoff.
pub fn brute_force_ap(dets: &[Vec<Detection>], gts: &[FullAnnotation], class: ClassId, iou: f64, mode: ApMode) -> Option<f64> {
    let npos: usize = gts.iter().map(|g| g.instances.iter().filter(|i| i.class == class).count()).sum();
    if npos == 0 {
        return None;
    }
    let mut ranked: Vec<(f64, usize, Detection)> = dets
        .iter()
        .enumerate()
        .flat_map(|(img, v)| v.iter().filter(|d| d.class == class).map(move |d| (d.score, img, *d)))
        .collect();
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut points = Vec::new();
    for k in 1..=ranked.len() {
        let tp = hits_at(&ranked[..k], gts, class, iou);
        points.push((tp as f64 / npos as f64, tp as f64 / k as f64));
    }
    let best_from = |j: usize| points[j..].iter().map(|p| p.1).fold(0.0, f64::max);
    Some(match mode {
        ApMode::AllPoint => {
            let mut prev = 0.0;
            let mut area = 0.0;
            for j in 0..points.len() {
                if points[j].0 > prev {
                    area += (points[j].0 - prev) * best_from(j);
                    prev = points[j].0;
                }
            }
            area
        }
        ApMode::ElevenPoint => {
            (0..=10)
                .map(|t| {
                    let t = t as f64 / 10.0;
                    points.iter().filter(|p| p.0 >= t).map(|p| p.1).fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    })
}

fn near_box(rng: &mut ChaCha8Rng, around: Option<&BoundingBox>) -> BoundingBox {
    match around {
        Some(b) => {
            let j = |r: &mut ChaCha8Rng| r.random_range(-4.0..4.0);
            let x0 = b.x_min() + j(rng);
            let y0 = b.y_min() + j(rng);
            let x1 = (b.x_max() + j(rng)).max(x0 + 1.0);
            let y1 = (b.y_max() + j(rng)).max(y0 + 1.0);
            BoundingBox::new(x0, y0, x1, y1).unwrap()
        }
        None => {
            let (x, y) = (rng.random_range(0.0..50.0), rng.random_range(0.0..50.0));
            let (w, h) = (rng.random_range(2.0..20.0), rng.random_range(2.0..20.0));
            BoundingBox::new(x, y, x + w, y + h).unwrap()
        }
    }
}

/// Random images with up to `max_dets` detections in total, often near a gt.
pub fn random_case(rng: &mut ChaCha8Rng, max_dets: usize, classes: u32) -> (Vec<Vec<Detection>>, Vec<FullAnnotation>) {
    let images = rng.random_range(1..4);
    let gts: Vec<FullAnnotation> = (0..images)
        .map(|_| {
            let n = rng.random_range(0..4);
            FullAnnotation::new(
                (0..n)
                    .map(|_| Instance::new(near_box(rng, None), ClassId::new(rng.random_range(1..=classes))))
                    .collect(),
            )
        })
        .collect();
    let mut dets = vec![Vec::new(); images];
    for _ in 0..rng.random_range(0..=max_dets) {
        let img = rng.random_range(0..images);
        let g = &gts[img].instances;
        let anchor = (!g.is_empty() && rng.random_bool(0.7)).then(|| &g[rng.random_range(0..g.len())]);
        let bbox = near_box(rng, anchor.map(|a| &a.bbox));
        let class = match anchor {
            Some(a) if rng.random_bool(0.8) => a.class,
            _ => ClassId::new(rng.random_range(1..=classes)),
        };
        dets[img].push(Detection::new(bbox, class, rng.random_range(0.0..1.0)).unwrap());
    }
    (dets, gts)
}

/// Largest disagreement with the oracle over `instances` random cases;
/// `Err` when defined-ness differs.
pub fn ap_disagreement(instances: usize, seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for n in 0..instances {
        let (dets, gts) = random_case(&mut rng, 6, 2);
        let iou = [0.3, 0.5, 0.7][n % 3];
        for class in [ClassId::new(1), ClassId::new(2)] {
            for mode in [ApMode::AllPoint, ApMode::ElevenPoint] {
                let got = average_precision(&dets, &gts, class, iou, mode).map_err(|e| e.to_string())?;
                let want = brute_force_ap(&dets, &gts, class, iou, mode);
                match (got, want) {
                    (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
                    (None, None) => {}
                    other => return Err(format!("case {n}: defined-ness differs {other:?}")),
                }
            }
        }
    }
    Ok(worst)
}

fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
    BoundingBox::new(x0, y0, x1, y1).unwrap()
}

/// `(name, all-point, 11-point, dets, gts)` with hand-computed values.
#[allow(clippy::type_complexity)]
pub fn fixtures() -> Vec<(&'static str, f64, f64, Vec<Vec<Detection>>, Vec<FullAnnotation>)> {
    let c = ClassId::new(1);
    let gt = |v: Vec<BoundingBox>| FullAnnotation::new(v.into_iter().map(|x| Instance::new(x, c)).collect());
    let det = |x: BoundingBox, s: f64| Detection::new(x, c, s).unwrap();
    vec![
        (
            "perfect",
            1.0,
            1.0,
            vec![vec![det(b(0.0, 0.0, 10.0, 10.0), 0.9)]],
            vec![gt(vec![b(0.0, 0.0, 10.0, 10.0)])],
        ),
        (
            "all wrong",
            0.0,
            0.0,
            vec![vec![det(b(40.0, 40.0, 50.0, 50.0), 0.9)]],
            vec![gt(vec![b(0.0, 0.0, 10.0, 10.0)])],
        ),
        (
            "hit then miss",
            0.5,
            6.0 / 11.0,
            vec![vec![det(b(0.0, 0.0, 10.0, 10.0), 0.9), det(b(40.0, 0.0, 50.0, 10.0), 0.4)]],
            vec![gt(vec![b(0.0, 0.0, 10.0, 10.0), b(0.0, 30.0, 10.0, 40.0)])],
        ),
    ]
}

/// Checks the six detection outcomes partition the scored detections and
/// that every gt is either found or missed.
pub fn tide_partition(scenes: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for n in 0..scenes {
        let (dets, gts) = random_case(&mut rng, 12, 3);
        let threshold = rng.random_range(0.0..0.6);
        let e = tide_dataset(&dets, &gts, threshold, 0.5, 0.1).map_err(|e| e.to_string())?;
        let scored = dets.iter().flatten().filter(|d| d.score >= threshold).count();
        let outcomes = e.correct + e.classification + e.localization + e.both + e.duplicate + e.background;
        if outcomes != scored || e.detections() != scored {
            return Err(format!("scene {n}: {outcomes} outcomes for {scored} detections"));
        }
        let total_gts: usize = gts.iter().map(|g| g.len()).sum();
        if e.correct + e.missed != total_gts {
            return Err(format!("scene {n}: {} found + {} missed != {total_gts}", e.correct, e.missed));
        }
    }
    Ok(())
}
