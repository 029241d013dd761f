//! Central-difference checks of every analytic gradient.

use dualweak::datamodel::{ClassId, FullAnnotation, Instance, WeakAnnotation};
use dualweak::detector::{anchor_grid, batch_loss, sample_batch, AnchorSpec, DetectorModel, DetectorSpec, FitHyper, PoolSpec};
use dualweak::geom::BoundingBox;
use dualweak::image::RgbImage;
use dualweak::nn::{softmax, softmax_backward, Parameters};
use dualweak::wsod::{
    mlc_loss, refinement_loss, regression_loss, wsddn_backward, wsddn_forward, Variant, WsodConfig, WsodModel,
    WsodSample, WsodWeights,
};
use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const COORDS: usize = 50;

/// Relative error `|g - fd| / max(|g|, |fd|)` over a random coordinate subset
/// of `x`, restricted to the first `limit` coordinates. Coordinates whose
/// difference quotients at `STEP` and `STEP / 2` disagree straddle a ReLU or
/// smooth-L1 kink and are left out.
pub fn check(x: &[f64], analytic: &[f64], limit: usize, f: &mut dyn FnMut(&[f64]) -> f64, rng: &mut ChaCha8Rng) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let n = limit.min(x.len());
    let picks = sample(rng, n, COORDS.min(n));
    let mut probe = x.to_vec();
    let mut quotient = |i: usize, h: f64| {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        (up - down) / (2.0 * h)
    };
    let (mut diff, mut ga, mut gf) = (0.0, 0.0, 0.0);
    for i in picks {
        let fd = quotient(i, STEP);
        let half = quotient(i, STEP / 2.0);
        if (fd - half).abs() > 1e-3 * fd.abs().max(half.abs()) + 1e-7 {
            continue;
        }
        diff += (analytic[i] - fd).powi(2);
        ga += analytic[i].powi(2);
        gf += fd.powi(2);
    }
    let scale = ga.sqrt().max(gf.sqrt());
    if scale < 1e-12 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}

fn matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, spread: f64) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.random_range(-spread..spread))
}

fn weak(rng: &mut ChaCha8Rng, c: usize) -> WeakAnnotation {
    let mut w: Vec<bool> = (0..c).map(|_| rng.random_bool(0.5)).collect();
    let k = rng.random_range(0..c);
    w[k] = true;
    WeakAnnotation::new(w)
}

fn rand_box(rng: &mut ChaCha8Rng, size: f64) -> BoundingBox {
    let w = rng.random_range(6.0..size * 0.6);
    let h = rng.random_range(6.0..size * 0.6);
    let x = rng.random_range(0.0..size - w);
    let y = rng.random_range(0.0..size - h);
    BoundingBox::new(x, y, x + w, y + h).unwrap()
}

fn scene(rng: &mut ChaCha8Rng, size: usize) -> (RgbImage, Vec<BoundingBox>) {
    let bg = [rng.random(), rng.random(), rng.random()];
    let mut img = RgbImage::filled(size, size, bg);
    let mut objects = Vec::new();
    for _ in 0..rng.random_range(1..4) {
        let b = rand_box(rng, size as f64);
        let base: [u8; 3] = [rng.random(), rng.random(), rng.random()];
        for y in b.y_min() as usize..b.y_max() as usize {
            for x in b.x_min() as usize..b.x_max() as usize {
                img.put(x, y, [base[0].wrapping_add((3 * x) as u8), base[1].wrapping_add((5 * y) as u8), base[2]]);
            }
        }
        objects.push(b);
    }
    (img, objects)
}

pub fn tiny_spec() -> DetectorSpec {
    DetectorSpec {
        width: 48,
        height: 48,
        num_classes: 2,
        hidden: 8,
        adapter_channels: 3,
        anchors: AnchorSpec {
            stride: 8,
            scales: vec![12.0],
            aspect_ratios: vec![1.0],
            min_count: 1,
        },
        pool: PoolSpec {
            bins: 2,
            context: 0.25,
            attention_grid: 3,
        },
        ..DetectorSpec::default()
    }
}

fn wsod_setup(rng: &mut ChaCha8Rng, variant: Variant) -> (WsodModel, WsodSample) {
    let fsod = DetectorModel::fresh(tiny_spec(), rng.random()).unwrap();
    let cfg = WsodConfig {
        variant,
        use_fe: false,
        ..WsodConfig::default()
    };
    let mut model = WsodModel::new(cfg, &fsod, rng.random()).unwrap();
    jitter(&mut model.weights, rng);
    let (image, objects) = scene(rng, 48);
    let mut boxes: Vec<BoundingBox> = objects.clone();
    for o in &objects {
        let j = |r: &mut ChaCha8Rng| r.random_range(-3.0..3.0);
        let b = BoundingBox::new(
            (o.x_min() + j(rng)).max(0.0),
            (o.y_min() + j(rng)).max(0.0),
            (o.x_max() + j(rng)).min(48.0),
            (o.y_max() + j(rng)).min(48.0),
        );
        boxes.extend(b.ok());
    }
    for _ in 0..3 {
        boxes.push(rand_box(rng, 48.0));
    }
    let sample = WsodSample {
        image,
        weak: weak(rng, 2),
        boxes,
    };
    (model, sample)
}

/// Random offsets on every parameter, biases included, so no unit sits on a
/// ReLU kink.
fn jitter<P: Parameters>(p: &mut P, rng: &mut ChaCha8Rng) {
    let flat: Vec<f64> = p.flatten().iter().map(|v| v + rng.random_range(-0.1..0.1)).collect();
    p.assign(&flat);
}

fn with_weights(model: &WsodModel, flat: &[f64]) -> WsodModel {
    let mut m = model.clone();
    m.weights.assign(flat);
    m
}

pub fn detector_loss(rng: &mut ChaCha8Rng) -> f64 {
    let spec = tiny_spec();
    let mut model = DetectorModel::fresh(spec.clone(), rng.random()).unwrap();
    jitter(&mut model.weights, rng);
    let (image, objects) = scene(rng, 48);
    let gts = FullAnnotation::new(
        objects
            .iter()
            .map(|b| Instance::new(*b, ClassId::new(rng.random_range(1..=2))))
            .collect(),
    );
    let anchors = anchor_grid(&spec.anchors, spec.width, spec.height);
    let hyper = FitHyper {
        anchors_per_image: 16,
        ..FitHyper::default()
    };
    let batch = sample_batch(&model, &anchors, &image, &gts, &hyper, rng);
    let reg_weight = rng.random_range(0.5..2.0);
    let (_, grad) = batch_loss(&model.weights, &batch, reg_weight);
    let x = model.weights.flatten();
    let mut f = |p: &[f64]| {
        let mut w = model.weights.clone();
        w.assign(p);
        batch_loss(&w, &batch, reg_weight).0
    };
    check(&x, &grad.flatten(), x.len(), &mut f, rng)
}

pub fn mlc(rng: &mut ChaCha8Rng) -> f64 {
    let (m, c) = (rng.random_range(2..9), rng.random_range(1..5));
    let xc = matrix(rng, m, c, 2.0);
    let xd = matrix(rng, m, c, 2.0);
    let w = weak(rng, c);
    let loss = |xc: &Array2<f64>, xd: &Array2<f64>| {
        let s = wsddn_forward(xc, xd).unwrap();
        mlc_loss(s.p.as_slice().unwrap(), &w)
    };
    let s = wsddn_forward(&xc, &xd).unwrap();
    let (_, dp) = loss(&xc, &xd);
    let (gc, gd) = wsddn_backward(&s, &dp);
    let x: Vec<f64> = xc.iter().chain(xd.iter()).copied().collect();
    let g: Vec<f64> = gc.iter().chain(gd.iter()).copied().collect();
    let mut f = |p: &[f64]| {
        let a = Array2::from_shape_vec((m, c), p[..m * c].to_vec()).unwrap();
        let b = Array2::from_shape_vec((m, c), p[m * c..].to_vec()).unwrap();
        loss(&a, &b).0
    };
    check(&x, &g, x.len(), &mut f, rng)
}

pub fn refinement(rng: &mut ChaCha8Rng) -> f64 {
    let (m, c) = (rng.random_range(2..9), rng.random_range(1..5));
    let logits = matrix(rng, m, c + 1, 3.0);
    let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..=c)).collect();
    let weights: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
    let r = softmax(&logits, 1);
    let (_, dr) = refinement_loss(&r, &labels, &weights);
    let g = softmax_backward(&r, &dr, 1);
    let x: Vec<f64> = logits.iter().copied().collect();
    let mut f = |p: &[f64]| {
        let l = Array2::from_shape_vec((m, c + 1), p.to_vec()).unwrap();
        refinement_loss(&softmax(&l, 1), &labels, &weights).0
    };
    check(&x, g.as_slice().unwrap(), x.len(), &mut f, rng)
}

pub fn regression(rng: &mut ChaCha8Rng) -> f64 {
    let (m, c) = (rng.random_range(2..9), rng.random_range(1..5));
    let out = matrix(rng, m, 4, 2.5);
    let proposals: Vec<BoundingBox> = (0..m).map(|_| rand_box(rng, 64.0)).collect();
    let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..=c)).collect();
    let seeds: Vec<Option<BoundingBox>> = labels
        .iter()
        .map(|&l| (l < c).then(|| rand_box(rng, 64.0)))
        .collect();
    let (_, g) = regression_loss(&out, &labels, &seeds, &proposals, c);
    let x: Vec<f64> = out.iter().copied().collect();
    let mut f = |p: &[f64]| {
        let o = Array2::from_shape_vec((m, 4), p.to_vec()).unwrap();
        regression_loss(&o, &labels, &seeds, &proposals, c).0
    };
    check(&x, g.as_slice().unwrap(), x.len(), &mut f, rng)
}

fn consistency(rng: &mut ChaCha8Rng, input_wise: bool) -> f64 {
    let (model, sample) = wsod_setup(rng, Variant::Casd);
    let maps = model.blocks.maps(&sample.image);
    let run = |m: &WsodModel, frozen: Option<&[Vec<f64>]>| {
        let mut grad = m.weights.zeros_like();
        let (loss, teachers) = if input_wise {
            m.input_wise(&sample, &maps, frozen, &mut grad, 1.0)
        } else {
            m.layer_wise(&sample, &maps, frozen, &mut grad, 1.0)
        };
        (loss, teachers, grad)
    };
    let (_, teachers, _) = run(&model, None);
    let (_, _, grad) = run(&model, Some(&teachers));
    let x = model.weights.flatten();
    let limit = model.weights.trunk.num_params();
    let mut f = |p: &[f64]| run(&with_weights(&model, p), Some(&teachers)).0;
    check(&x, &grad.flatten(), limit, &mut f, rng)
}

pub fn input_wise(rng: &mut ChaCha8Rng) -> f64 {
    consistency(rng, true)
}

pub fn layer_wise(rng: &mut ChaCha8Rng) -> f64 {
    consistency(rng, false)
}

fn total(rng: &mut ChaCha8Rng, variant: Variant) -> f64 {
    let (model, sample) = wsod_setup(rng, variant);
    let (_, _, targets) = model.loss_and_grad(&sample, None).unwrap();
    let (_, grad, _): (_, WsodWeights, _) = model.loss_and_grad(&sample, Some(&targets)).unwrap();
    let x = model.weights.flatten();
    let mut f = |p: &[f64]| {
        with_weights(&model, p)
            .loss_and_grad(&sample, Some(&targets))
            .unwrap()
            .0
            .total
    };
    check(&x, &grad.flatten(), x.len(), &mut f, rng)
}

pub fn total_oicr(rng: &mut ChaCha8Rng) -> f64 {
    total(rng, Variant::Oicr)
}

pub fn total_casd(rng: &mut ChaCha8Rng) -> f64 {
    total(rng, Variant::Casd)
}

/// Every family by name.
pub fn families() -> Vec<(&'static str, fn(&mut ChaCha8Rng) -> f64)> {
    vec![
        ("detector loss", detector_loss),
        ("multi-label", mlc),
        ("refinement", refinement),
        ("box regression", regression),
        ("input-wise consistency", input_wise),
        ("layer-wise consistency", layer_wise),
        ("OICR total", total_oicr),
        ("CASD total", total_casd),
    ]
}

/// Worst relative error of each family over `instances` random cases.
pub fn worst_errors(instances: usize, seed: u64) -> Vec<(&'static str, f64)> {
    families()
        .into_iter()
        .enumerate()
        .map(|(k, (name, family))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (k as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let worst = (0..instances).map(|_| family(&mut rng)).fold(0.0, f64::max);
            (name, worst)
        })
        .collect()
}
