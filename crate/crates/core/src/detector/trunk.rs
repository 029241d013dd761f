//! Learned feature pathway shared by the detector and the WSOD model:
//! per-block 1x1 channel adapters over pooled grids, then two FC layers.

use ndarray::{concatenate, s, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::features::BlockMaps;
use crate::nn::{relu, relu_backward, Linear, Parameters};

/// Pool every block over a `grid x grid` partition of each region. Returns
/// one `(regions * grid^2) x channels_q` matrix per block.
pub fn pool_raw(maps: &BlockMaps, regions: &[[f64; 4]], grid: usize) -> Vec<Array2<f64>> {
    let cells = grid * grid;
    maps.maps
        .iter()
        .enumerate()
        .map(|(q, m)| {
            let k = m.channels();
            let mut buf = Vec::with_capacity(regions.len() * cells * k);
            for r in regions {
                maps.pool_block(q, *r, grid, &mut buf);
            }
            Array2::from_shape_vec((regions.len() * cells, k), buf).expect("pooled shape")
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trunk {
    /// One `channels_q -> adapter_channels` map per block, shared across cells.
    pub adapters: Vec<Linear>,
    pub fc1: Linear,
    pub fc2: Linear,
    /// Cells per pooled feature grid.
    pub cells: usize,
}

/// Intermediate values of a trunk forward pass.
#[derive(Debug, Clone)]
pub struct TrunkCache {
    n: usize,
    raw: Vec<Array2<f64>>,
    adapter_pre: Vec<Array2<f64>>,
    v: Array2<f64>,
    pre1: Array2<f64>,
    h1: Array2<f64>,
    pre2: Array2<f64>,
    /// `n x hidden` output features.
    pub h: Array2<f64>,
}

/// Adapter activations on the attention grid.
#[derive(Debug, Clone)]
pub struct AdapterCache {
    raw: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    /// Per block, `(n * cells) x adapter_channels` post-ReLU activations.
    pub out: Vec<Array2<f64>>,
}

impl Trunk {
    pub fn new<R: Rng>(block_channels: &[usize], adapter_channels: usize, cells: usize, hidden: usize, rng: &mut R) -> Self {
        let adapters = block_channels
            .iter()
            .map(|&k| Linear::init(k, adapter_channels, 1.0, rng))
            .collect();
        let input = block_channels.len() * cells * adapter_channels;
        Self {
            adapters,
            fc1: Linear::init(input, hidden, 1.0, rng),
            fc2: Linear::init(hidden, hidden, 1.0, rng),
            cells,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            adapters: self
                .adapters
                .iter()
                .map(|a| Linear::zeros(a.input_dim(), a.output_dim()))
                .collect(),
            fc1: Linear::zeros(self.fc1.input_dim(), self.fc1.output_dim()),
            fc2: Linear::zeros(self.fc2.input_dim(), self.fc2.output_dim()),
            cells: self.cells,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.fc2.output_dim()
    }

    pub fn adapter_channels(&self) -> usize {
        self.adapters[0].output_dim()
    }

    /// Whether another trunk has identical tensor shapes.
    pub fn same_shape(&self, other: &Trunk) -> bool {
        self.cells == other.cells
            && self.adapters.len() == other.adapters.len()
            && self
                .adapters
                .iter()
                .zip(&other.adapters)
                .all(|(a, b)| a.weight.dim() == b.weight.dim())
            && self.fc1.weight.dim() == other.fc1.weight.dim()
            && self.fc2.weight.dim() == other.fc2.weight.dim()
    }

    /// `raw` holds per-block pooled grids for `n` boxes, as from [`pool_raw`].
    pub fn forward(&self, raw: Vec<Array2<f64>>, n: usize) -> TrunkCache {
        let f = self.adapter_channels();
        let mut adapter_pre = Vec::with_capacity(raw.len());
        let mut parts = Vec::with_capacity(raw.len());
        for (adapter, r) in self.adapters.iter().zip(&raw) {
            let pre = adapter.forward(r.view());
            let act = relu(&pre);
            parts.push(act.into_shape_with_order((n, self.cells * f)).expect("adapter reshape"));
            adapter_pre.push(pre);
        }
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        let v = concatenate(Axis(1), &views).expect("feature concat");
        let pre1 = self.fc1.forward(v.view());
        let h1 = relu(&pre1);
        let pre2 = self.fc2.forward(h1.view());
        let h = relu(&pre2);
        TrunkCache {
            n,
            raw,
            adapter_pre,
            v,
            pre1,
            h1,
            pre2,
            h,
        }
    }

    /// Accumulate gradients for `dL/dh` into `grad`.
    pub fn backward(&self, cache: &TrunkCache, dh: &Array2<f64>, grad: &mut Trunk) {
        let f = self.adapter_channels();
        let d_pre2 = relu_backward(&cache.pre2, dh);
        let d_h1 = self.fc2.backward(cache.h1.view(), d_pre2.view(), &mut grad.fc2);
        let d_pre1 = relu_backward(&cache.pre1, &d_h1);
        let d_v = self.fc1.backward(cache.v.view(), d_pre1.view(), &mut grad.fc1);
        let width = self.cells * f;
        for (q, adapter) in self.adapters.iter().enumerate() {
            let block = d_v.slice(s![.., q * width..(q + 1) * width]).to_owned();
            let d_act = block
                .into_shape_with_order((cache.n * self.cells, f))
                .expect("adapter grad reshape");
            let d_pre = relu_backward(&cache.adapter_pre[q], &d_act);
            adapter.backward_params(cache.raw[q].view(), d_pre.view(), &mut grad.adapters[q]);
        }
    }

    /// Adapter activations on an arbitrary pooled grid (used for attention).
    pub fn adapters_forward(&self, raw: Vec<Array2<f64>>) -> AdapterCache {
        let mut pre = Vec::with_capacity(raw.len());
        let mut out = Vec::with_capacity(raw.len());
        for (adapter, r) in self.adapters.iter().zip(&raw) {
            let p = adapter.forward(r.view());
            out.push(relu(&p));
            pre.push(p);
        }
        AdapterCache { raw, pre, out }
    }

    /// Backward through [`Trunk::adapters_forward`] given `dL/d out`.
    pub fn adapters_backward(&self, cache: &AdapterCache, d_out: &[Array2<f64>], grad: &mut Trunk) {
        for (q, adapter) in self.adapters.iter().enumerate() {
            let d_pre = relu_backward(&cache.pre[q], &d_out[q]);
            adapter.backward_params(cache.raw[q].view(), d_pre.view(), &mut grad.adapters[q]);
        }
    }
}

impl Parameters for Trunk {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = self.adapters.iter().flat_map(|a| a.tensors()).collect();
        v.extend(self.fc1.tensors());
        v.extend(self.fc2.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = self.adapters.iter_mut().flat_map(|a| a.tensors_mut()).collect();
        v.extend(self.fc1.tensors_mut());
        v.extend(self.fc2.tensors_mut());
        v
    }
}
