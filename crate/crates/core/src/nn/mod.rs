//! Minimal neural-network toolkit with hand-written backpropagation.
//!
//! Every network keeps its trainable parameters in one flat `Vec<f64>`; layers
//! address their weights through [`ParamSlice`]s into it. Gradients use the same
//! layout, which keeps the optimizer, checkpoints and finite-difference checks
//! trivially generic.

mod layers;
mod lstm;

pub use layers::{BatchNorm, BnCache, BnStats, Conv2d, ConvStage, ConvTrunk, Dense, MaxPool, PoolCache, TrunkCache};
pub use lstm::{Lstm, LstmCache};

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSlice {
    pub offset: usize,
    pub len: usize,
}

impl ParamSlice {
    pub fn get<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.offset..self.offset + self.len]
    }

    pub fn get_mut<'a>(&self, params: &'a mut [f64]) -> &'a mut [f64] {
        &mut params[self.offset..self.offset + self.len]
    }
}

/// Hands out consecutive slices of a flat parameter vector.
#[derive(Debug, Default, Clone)]
pub struct ParamLayout {
    len: usize,
}

impl ParamLayout {
    pub fn alloc(&mut self, len: usize) -> ParamSlice {
        let s = ParamSlice { offset: self.len, len };
        self.len += len;
        s
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Batch of feature maps, layout (n, c, h, w) row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w, data: vec![0.0; n * c * h * w] }
    }

    pub fn from_data(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * c * h * w);
        Self { n, c, h, w, data }
    }

    pub fn same_shape(&self) -> Self {
        Self::zeros(self.n, self.c, self.h, self.w)
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    /// Values per batch element.
    pub fn item_len(&self) -> usize {
        self.c * self.h * self.w
    }
}

/// Fixed affine standardization applied to raw log-Mel inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub mean: f64,
    pub std: f64,
}

impl Default for InputNorm {
    fn default() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }
}

impl InputNorm {
    /// Scalar mean and standard deviation over a set of raw inputs.
    pub fn fit<'a>(inputs: impl IntoIterator<Item = &'a [f64]>) -> Self {
        let (mut n, mut s, mut s2) = (0usize, 0.0, 0.0);
        for x in inputs {
            for &v in x {
                n += 1;
                s += v;
                s2 += v * v;
            }
        }
        if n == 0 {
            return Self::default();
        }
        let mean = s / n as f64;
        let var = (s2 / n as f64 - mean * mean).max(0.0);
        let std = libm::sqrt(var);
        Self { mean, std: if std > 1e-9 { std } else { 1.0 } }
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }
}

pub fn leaky_relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

pub fn leaky_relu_grad(pre: f64) -> f64 {
    if pre > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Uniform init with bound `gain · sqrt(3 / fan_in)` (unit-variance preserving for gain 1).
pub fn init_uniform<R: Rng + ?Sized>(dst: &mut [f64], fan_in: usize, gain: f64, rng: &mut R) {
    let bound = gain * libm::sqrt(3.0 / fan_in.max(1) as f64);
    for v in dst {
        *v = rng.gen_range(-bound..bound);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: vec![0.0; n_params], v: vec![0.0; n_params] }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= self.lr * mh / (libm::sqrt(vh) + self.eps);
        }
    }
}
