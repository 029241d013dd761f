//! Loss-level building blocks of the MIL detector. Score matrices are laid
//! out with one row per proposal and one column per class.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::datamodel::WeakAnnotation;
use crate::detector::encode_offsets;
use crate::error::{Error, Result};
use crate::geom::BoundingBox;
use crate::nn::{smooth_l1, softmax, softmax_backward};

/// Clamp applied to probabilities before taking logs.
pub const LOG_EPS: f64 = 1e-8;

/// Two-stream scores for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrices {
    /// `M x C` class-stream softmax (each row sums to 1).
    pub s_cls: Array2<f64>,
    /// `M x C` detection-stream softmax (each column sums to 1).
    pub s_det: Array2<f64>,
    /// Instance scores `s_cls * s_det`.
    pub x0: Array2<f64>,
    /// Image-level scores, column sums of `x0`.
    pub p: Array1<f64>,
}

pub fn wsddn_forward(x_cls: &Array2<f64>, x_det: &Array2<f64>) -> Result<ScoreMatrices> {
    if x_cls.dim() != x_det.dim() {
        return Err(Error::invalid("class and detection streams differ in shape"));
    }
    if x_cls.nrows() == 0 {
        return Err(Error::invalid("no proposals"));
    }
    if x_cls.iter().chain(x_det.iter()).any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite proposal scores"));
    }
    let s_cls = softmax(x_cls, 1);
    let s_det = softmax(x_det, 0);
    let x0 = &s_cls * &s_det;
    let p = x0.sum_axis(Axis(0)).mapv(|v| v.min(1.0));
    Ok(ScoreMatrices { s_cls, s_det, x0, p })
}

/// Gradients with respect to both stream logits, given `dL/dp`.
pub fn wsddn_backward(s: &ScoreMatrices, dp: &[f64]) -> (Array2<f64>, Array2<f64>) {
    let dp = Array1::from(dp.to_vec());
    let dx0 = Array2::from_shape_fn(s.x0.dim(), |(_, c)| dp[c]);
    let d_scls = &dx0 * &s.s_det;
    let d_sdet = &dx0 * &s.s_cls;
    (softmax_backward(&s.s_cls, &d_scls, 1), softmax_backward(&s.s_det, &d_sdet, 0))
}

/// Multi-label binary cross-entropy on image scores, with `dL/dp`.
pub fn mlc_loss(p: &[f64], weak: &WeakAnnotation) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut grad = vec![0.0; p.len()];
    for (c, (&pc, &y)) in p.iter().zip(weak.as_slice()).enumerate() {
        let q = pc.clamp(LOG_EPS, 1.0 - LOG_EPS);
        let inside = pc > LOG_EPS && pc < 1.0 - LOG_EPS;
        if y {
            loss -= q.ln();
            if inside {
                grad[c] = -1.0 / q;
            }
        } else {
            loss -= (1.0 - q).ln();
            if inside {
                grad[c] = 1.0 / (1.0 - q);
            }
        }
    }
    (loss, grad)
}

/// Pseudo-labels for one refinement head.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// Class index in `0..C`, or `C` for background.
    pub labels: Vec<usize>,
    pub weights: Vec<f64>,
    /// Box of the seed each foreground proposal follows.
    pub seed_boxes: Vec<Option<BoundingBox>>,
    /// `(class index, proposal)` of each seed.
    pub seeds: Vec<(usize, usize)>,
}

/// Seeds are the top-scoring proposal of every present class; proposals
/// overlapping their best seed at `IoU >= fg_iou` take its class, the rest
/// are background. Either way the weight is that seed's score.
pub fn oicr_assign(prev: ArrayView2<f64>, boxes: &[BoundingBox], weak: &WeakAnnotation, fg_iou: f64) -> Assignment {
    let m = boxes.len();
    let c = weak.num_classes();
    let mut seeds = Vec::new();
    for cls in weak.present_classes() {
        let j = cls.index();
        let mut best = 0;
        for i in 1..m {
            if prev[[i, j]] > prev[[best, j]] {
                best = i;
            }
        }
        seeds.push((j, best));
    }
    let mut labels = vec![c; m];
    let mut weights = vec![if seeds.is_empty() { 1.0 } else { 0.0 }; m];
    let mut seed_boxes = vec![None; m];
    for i in 0..m {
        if let Some(&(j, s)) = seeds.iter().find(|&&(_, s)| s == i) {
            labels[i] = j;
            weights[i] = prev[[s, j]];
            seed_boxes[i] = Some(boxes[s]);
            continue;
        }
        let mut best: Option<(f64, usize, usize)> = None;
        for &(j, s) in &seeds {
            let v = boxes[i].iou(&boxes[s]);
            if best.is_none_or(|(bv, _, _)| v > bv) {
                best = Some((v, j, s));
            }
        }
        if let Some((v, j, s)) = best {
            weights[i] = prev[[s, j]];
            if v >= fg_iou {
                labels[i] = j;
                seed_boxes[i] = Some(boxes[s]);
            }
        }
    }
    Assignment {
        labels,
        weights,
        seed_boxes,
        seeds,
    }
}

/// `-(1/M) sum_i w_i log r[i, label_i]` with `dL/dr`.
pub fn refinement_loss(r: &Array2<f64>, labels: &[usize], weights: &[f64]) -> (f64, Array2<f64>) {
    let m = r.nrows().max(1) as f64;
    let mut grad = Array2::zeros(r.dim());
    let mut loss = 0.0;
    for (i, (&y, &w)) in labels.iter().zip(weights).enumerate() {
        let v = r[[i, y]];
        loss -= w * v.max(LOG_EPS).ln() / m;
        if v > LOG_EPS {
            grad[[i, y]] = -w / (v * m);
        }
    }
    (loss, grad)
}

/// Smooth-L1 between predicted offsets and proposal-to-seed offsets over
/// foreground proposals, divided by `M`, with `dL/d reg_out`.
pub fn regression_loss(
    reg_out: &Array2<f64>,
    labels: &[usize],
    seed_boxes: &[Option<BoundingBox>],
    proposals: &[BoundingBox],
    num_classes: usize,
) -> (f64, Array2<f64>) {
    let m = proposals.len().max(1) as f64;
    let mut grad = Array2::zeros(reg_out.dim());
    let mut loss = 0.0;
    for i in 0..proposals.len() {
        let Some(seed) = seed_boxes[i] else { continue };
        if labels[i] >= num_classes {
            continue;
        }
        let t = encode_offsets(&proposals[i], &seed);
        for k in 0..4 {
            let (v, d) = smooth_l1(reg_out[[i, k]] - t[k]);
            loss += v / m;
            grad[[i, k]] = d / m;
        }
    }
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use ndarray::array;
    use rand::Rng;

    fn rand_matrix(r: usize, c: usize, seed: u64) -> Array2<f64> {
        let mut rng = rng_for(seed, "m", 0);
        Array2::from_shape_fn((r, c), |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn single_proposal_reduces_to_class_softmax() {
        let x = array![[0.3, -1.0, 2.0]];
        let s = wsddn_forward(&x, &array![[5.0, 1.0, -3.0]]).unwrap();
        let expect = softmax(&x, 1);
        for c in 0..3 {
            assert!((s.p[c] - expect[[0, c]]).abs() < 1e-15);
        }
    }

    #[test]
    fn two_by_two_by_hand() {
        // proposals x classes
        let x_cls = array![[0.0, 1.0], [2.0, 0.0]];
        let x_det = array![[1.0, 0.0], [0.0, 0.0]];
        let s = wsddn_forward(&x_cls, &x_det).unwrap();
        let e = std::f64::consts::E;
        let sc = [[1.0 / (1.0 + e), e / (1.0 + e)], [e * e / (e * e + 1.0), 1.0 / (e * e + 1.0)]];
        let sd = [[e / (e + 1.0), 0.5], [1.0 / (e + 1.0), 0.5]];
        for c in 0..2 {
            let p = sc[0][c] * sd[0][c] + sc[1][c] * sd[1][c];
            assert!((s.p[c] - p).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_rejected() {
        assert!(wsddn_forward(&array![[f64::NAN]], &array![[0.0]]).is_err());
    }

    #[test]
    fn mlc_loss_edges() {
        let y = WeakAnnotation::new(vec![true, false]);
        assert!(mlc_loss(&[1.0, 0.0], &y).0 < 1e-7);
        assert_eq!(mlc_loss(&[0.0, 0.0], &WeakAnnotation::zeros(2)).0.abs() < 1e-7, true);
    }

    #[test]
    fn mlc_gradient_matches_finite_differences() {
        let y = WeakAnnotation::new(vec![true, false, true]);
        let p = [0.3, 0.6, 0.9];
        let (_, g) = mlc_loss(&p, &y);
        let h = 1e-6;
        for c in 0..3 {
            let mut a = p;
            a[c] += h;
            let mut b = p;
            b[c] -= h;
            let fd = (mlc_loss(&a, &y).0 - mlc_loss(&b, &y).0) / (2.0 * h);
            assert!((fd - g[c]).abs() <= 1e-6 * fd.abs().max(g[c].abs()));
        }
    }

    #[test]
    fn wsddn_backward_matches_finite_differences() {
        let xc = rand_matrix(4, 3, 1);
        let xd = rand_matrix(4, 3, 2);
        let y = WeakAnnotation::new(vec![true, false, true]);
        let f = |a: &Array2<f64>, b: &Array2<f64>| {
            let s = wsddn_forward(a, b).unwrap();
            mlc_loss(s.p.as_slice().unwrap(), &y).0
        };
        let s = wsddn_forward(&xc, &xd).unwrap();
        let (_, dp) = mlc_loss(s.p.as_slice().unwrap(), &y);
        let (gc, gd) = wsddn_backward(&s, &dp);
        let h = 1e-6;
        for idx in [(0, 0), (1, 2), (3, 1)] {
            let (mut a, mut b) = (xc.clone(), xc.clone());
            a[idx] += h;
            b[idx] -= h;
            let fd = (f(&a, &xd) - f(&b, &xd)) / (2.0 * h);
            assert!((fd - gc[idx]).abs() < 1e-7, "cls {idx:?}");
            let (mut a, mut b) = (xd.clone(), xd.clone());
            a[idx] += h;
            b[idx] -= h;
            let fd = (f(&xc, &a) - f(&xc, &b)) / (2.0 * h);
            assert!((fd - gd[idx]).abs() < 1e-7, "det {idx:?}");
        }
    }

    fn bb(x0: f64, x1: f64) -> BoundingBox {
        BoundingBox::new(x0, 0.0, x1, 10.0).unwrap()
    }

    #[test]
    fn assign_single_proposal() {
        let prev = array![[0.7, 0.1]];
        let a = oicr_assign(prev.view(), &[bb(0.0, 10.0)], &WeakAnnotation::new(vec![true, false]), 0.5);
        assert_eq!(a.labels, vec![0]);
        assert_eq!(a.weights, vec![0.7]);
    }

    #[test]
    fn assign_by_seed_overlap() {
        // IoUs with the seed: 1.0, 0.6, 0.1
        let boxes = [bb(0.0, 10.0), bb(0.0, 6.0), bb(9.0, 19.0)];
        assert!((boxes[1].iou(&boxes[0]) - 0.6).abs() < 1e-12);
        assert!((boxes[2].iou(&boxes[0]) - 1.0 / 19.0).abs() < 1e-12);
        let prev = array![[0.2, 0.9], [0.1, 0.05], [0.3, 0.05]];
        let a = oicr_assign(prev.view(), &boxes, &WeakAnnotation::new(vec![false, true]), 0.5);
        assert_eq!(a.labels, vec![1, 1, 2]);
        assert_eq!(a.weights, vec![0.9, 0.9, 0.9]);
        assert_eq!(a.seed_boxes[1], Some(boxes[0]));
        assert_eq!(a.seed_boxes[2], None);
    }

    #[test]
    fn refinement_loss_edges() {
        let perfect = array![[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(refinement_loss(&perfect, &[0, 2], &[1.0, 1.0]).0.abs() < 1e-12);
        let uniform = Array2::from_elem((3, 4), 0.25);
        let (l, _) = refinement_loss(&uniform, &[0, 1, 3], &[1.0; 3]);
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn refinement_gradient_matches_finite_differences() {
        let r = softmax(&rand_matrix(3, 4, 3), 1);
        let labels = [0, 3, 2];
        let w = [0.8, 0.3, 0.5];
        let (_, g) = refinement_loss(&r, &labels, &w);
        let h = 1e-7;
        for i in 0..3 {
            for j in 0..4 {
                let (mut a, mut b) = (r.clone(), r.clone());
                a[[i, j]] += h;
                b[[i, j]] -= h;
                let fd = (refinement_loss(&a, &labels, &w).0 - refinement_loss(&b, &labels, &w).0) / (2.0 * h);
                assert!((fd - g[[i, j]]).abs() <= 1e-6 * fd.abs().max(g[[i, j]].abs()) + 1e-12);
            }
        }
    }

    #[test]
    fn regression_loss_edges_and_gradient() {
        let p = [bb(0.0, 10.0), bb(2.0, 11.0)];
        let seeds = [Some(p[0]), Some(p[0])];
        let zero = Array2::zeros((2, 4));
        assert_eq!(regression_loss(&zero, &[0, 2], &seeds, &p, 2).0, 0.0);
        assert_eq!(regression_loss(&zero, &[2, 2], &[None, None], &p, 2).0, 0.0);
        let out = rand_matrix(2, 4, 4) * 0.4;
        let (_, g) = regression_loss(&out, &[0, 1], &seeds, &p, 2);
        let h = 1e-6;
        for i in 0..2 {
            for k in 0..4 {
                let (mut a, mut b) = (out.clone(), out.clone());
                a[[i, k]] += h;
                b[[i, k]] -= h;
                let fd = (regression_loss(&a, &[0, 1], &seeds, &p, 2).0 - regression_loss(&b, &[0, 1], &seeds, &p, 2).0)
                    / (2.0 * h);
                assert!((fd - g[[i, k]]).abs() <= 1e-6 * fd.abs().max(g[[i, k]].abs()) + 1e-12);
            }
        }
    }
}
