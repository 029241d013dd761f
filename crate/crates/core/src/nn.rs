//! Small dense-layer toolkit with hand-written backward passes.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Anything holding trainable tensors, visited in a fixed order.
pub trait Parameters {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for t in self.tensors() {
            out.extend_from_slice(t);
        }
        out
    }

    fn assign(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        assert_eq!(offset, flat.len(), "parameter count mismatch");
    }

    /// `self += scale * other`, tensor by tensor.
    fn add_scaled(&mut self, other: &Self, scale: f64)
    where
        Self: Sized,
    {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    fn l2_norm(&self) -> f64 {
        self.tensors().iter().flat_map(|t| t.iter()).map(|x| x * x).sum::<f64>().sqrt()
    }

    fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= factor);
        }
    }

    fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill(0.0);
        }
    }
}

/// Fully connected layer `y = x W^T + b` on row-major batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `out x in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    /// He-style normal init with standard deviation `gain * sqrt(2 / input)`.
    pub fn init<R: Rng>(input: usize, output: usize, gain: f64, rng: &mut R) -> Self {
        let std = gain * (2.0 / input.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let weight = Array2::from_shape_fn((output, input), |_| normal.sample(rng));
        Self {
            weight,
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight.t());
        y += &self.bias;
        y
    }

    /// Accumulate parameter gradients into `grad` and return `dL/dx`.
    pub fn backward(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.weight += &dy.t().dot(&x);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight)
    }

    /// Backward pass without the input gradient.
    pub fn backward_params(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Linear) {
        grad.weight += &dy.t().dot(&x);
        grad.bias += &dy.sum_axis(Axis(0));
    }
}

impl Parameters for Linear {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![
            self.weight.as_slice().expect("standard layout"),
            self.bias.as_slice().expect("standard layout"),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.weight.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ]
    }
}

pub fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Mask the upstream gradient by the ReLU's active set.
pub fn relu_backward(pre: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut out = dy.clone();
    out.zip_mut_with(pre, |g, &p| {
        if p <= 0.0 {
            *g = 0.0
        }
    });
    out
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax along `axis` (1 = within each row, 0 = within each column).
pub fn softmax(x: &Array2<f64>, axis: usize) -> Array2<f64> {
    let mut out = x.clone();
    for mut lane in out.lanes_mut(Axis(axis)) {
        let m = lane.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        lane.mapv_inplace(|v| (v - m).exp());
        let s = lane.sum();
        lane.mapv_inplace(|v| v / s);
    }
    out
}

/// Given `s = softmax(x)` along `axis` and `dL/ds`, return `dL/dx`.
pub fn softmax_backward(s: &Array2<f64>, ds: &Array2<f64>, axis: usize) -> Array2<f64> {
    let mut out = Array2::zeros(s.raw_dim());
    for ((s_lane, ds_lane), mut o_lane) in s
        .lanes(Axis(axis))
        .into_iter()
        .zip(ds.lanes(Axis(axis)))
        .zip(out.lanes_mut(Axis(axis)))
    {
        let dot: f64 = s_lane.iter().zip(ds_lane.iter()).map(|(a, b)| a * b).sum();
        for ((o, &sv), &dv) in o_lane.iter_mut().zip(s_lane.iter()).zip(ds_lane.iter()) {
            *o = sv * (dv - dot);
        }
    }
    out
}

/// Smooth-L1 with transition at `|d| = 1`: returns `(value, derivative)`.
#[inline]
pub fn smooth_l1(d: f64) -> (f64, f64) {
    if d.abs() < 1.0 {
        (0.5 * d * d, d)
    } else {
        (d.abs() - 0.5, d.signum())
    }
}

/// SGD with momentum and L2 weight decay over a flat parameter view.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step<P: Parameters>(&mut self, model: &mut P, grad: &P) {
        let grads = grad.tensors();
        let total: usize = grads.iter().map(|g| g.len()).sum();
        if self.velocity.len() != total {
            self.velocity = vec![0.0; total];
        }
        let mut offset = 0;
        for (p, g) in model.tensors_mut().into_iter().zip(grads) {
            for (i, (w, &dw)) in p.iter_mut().zip(g).enumerate() {
                let v = &mut self.velocity[offset + i];
                *v = self.momentum * *v + dw + self.weight_decay * *w;
                *w -= self.lr * *v;
            }
            offset += p.len();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_axes() {
        let x = array![[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]];
        let rows = softmax(&x, 1);
        for r in rows.rows() {
            assert!((r.sum() - 1.0).abs() < 1e-12);
        }
        let cols = softmax(&x, 0);
        for c in cols.columns() {
            assert!((c.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let x = array![[0.3, -1.2, 0.7], [1.1, 0.4, -0.5]];
        let w = array![[0.2, 0.9, -0.4], [0.5, -0.3, 0.8]];
        for axis in [0, 1] {
            let f = |x: &Array2<f64>| (softmax(x, axis) * &w).sum();
            let s = softmax(&x, axis);
            let g = softmax_backward(&s, &w, axis);
            let h = 1e-6;
            for idx in [(0, 0), (0, 2), (1, 1)] {
                let mut xp = x.clone();
                xp[idx] += h;
                let mut xm = x.clone();
                xm[idx] -= h;
                let fd = (f(&xp) - f(&xm)) / (2.0 * h);
                assert!((fd - g[idx]).abs() < 1e-8, "axis {axis} {idx:?}: {fd} vs {}", g[idx]);
            }
        }
    }

    #[test]
    fn linear_round_trip_params() {
        let mut rng = crate::rng::rng_for(0, "lin", 0);
        let a = Linear::init(3, 2, 1.0, &mut rng);
        let mut b = Linear::zeros(3, 2);
        b.assign(&a.flatten());
        assert_eq!(a, b);
        assert_eq!(a.num_params(), 8);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }
}
