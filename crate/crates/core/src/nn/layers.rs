use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{init_uniform, leaky_relu, leaky_relu_grad, ParamLayout, ParamSlice, Tensor4};

/// 2-D convolution, odd square kernel, stride 1, zero "same" padding.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub w: ParamSlice,
    pub b: ParamSlice,
}

impl Conv2d {
    pub fn new(layout: &mut ParamLayout, cin: usize, cout: usize, k: usize) -> Self {
        assert!(k % 2 == 1, "kernel must be odd");
        Self { cin, cout, k, w: layout.alloc(cout * cin * k * k), b: layout.alloc(cout) }
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut [f64], rng: &mut R) {
        init_uniform(self.w.get_mut(params), self.cin * self.k * self.k, 2f64.sqrt(), rng);
        self.b.get_mut(params).fill(0.0);
    }

    /// Valid output range along one axis for kernel offset `d`.
    fn span(d: isize, len: usize) -> (usize, usize) {
        let lo = (-d).max(0) as usize;
        let hi = (len as isize - d.max(0)).max(0) as usize;
        (lo, hi.max(lo))
    }

    pub fn forward(&self, params: &[f64], x: &Tensor4) -> Tensor4 {
        assert_eq!(x.c, self.cin);
        let w = self.w.get(params);
        let b = self.b.get(params);
        let p = (self.k / 2) as isize;
        let mut y = Tensor4::zeros(x.n, self.cout, x.h, x.w);
        for n in 0..x.n {
            for co in 0..self.cout {
                let ybase = y.idx(n, co, 0, 0);
                y.data[ybase..ybase + x.h * x.w].fill(b[co]);
                for ci in 0..self.cin {
                    for ky in 0..self.k {
                        let dy = ky as isize - p;
                        let (y0, y1) = Self::span(dy, x.h);
                        for kx in 0..self.k {
                            let dx = kx as isize - p;
                            let (x0, x1) = Self::span(dx, x.w);
                            let wv = w[((co * self.cin + ci) * self.k + ky) * self.k + kx];
                            for oy in y0..y1 {
                                let yrow = ybase + oy * x.w;
                                let xrow = x.idx(n, ci, (oy as isize + dy) as usize, 0) as isize + dx;
                                let src = &x.data[(xrow + x0 as isize) as usize..(xrow + x1 as isize) as usize];
                                for (o, s) in y.data[yrow + x0..yrow + x1].iter_mut().zip(src) {
                                    *o += wv * s;
                                }
                            }
                        }
                    }
                }
            }
        }
        y
    }

    /// Accumulates weight gradients; returns the input gradient when `need_dx`.
    pub fn backward(&self, params: &[f64], x: &Tensor4, dy: &Tensor4, grads: &mut [f64], need_dx: bool) -> Option<Tensor4> {
        let w = self.w.get(params);
        let p = (self.k / 2) as isize;
        let mut dx_t = need_dx.then(|| x.same_shape());
        let mut gw = vec![0.0; self.w.len];
        let mut gb = vec![0.0; self.b.len];
        for n in 0..x.n {
            for co in 0..self.cout {
                let ybase = dy.idx(n, co, 0, 0);
                gb[co] += dy.data[ybase..ybase + x.h * x.w].iter().sum::<f64>();
                for ci in 0..self.cin {
                    for ky in 0..self.k {
                        let oyd = ky as isize - p;
                        let (y0, y1) = Self::span(oyd, x.h);
                        for kx in 0..self.k {
                            let oxd = kx as isize - p;
                            let (x0, x1) = Self::span(oxd, x.w);
                            let wi = ((co * self.cin + ci) * self.k + ky) * self.k + kx;
                            let wv = w[wi];
                            let mut acc = 0.0;
                            for oy in y0..y1 {
                                let yrow = ybase + oy * x.w;
                                let xrow = x.idx(n, ci, (oy as isize + oyd) as usize, 0) as isize + oxd;
                                let (s0, s1) = ((xrow + x0 as isize) as usize, (xrow + x1 as isize) as usize);
                                let g = &dy.data[yrow + x0..yrow + x1];
                                let xs = &x.data[s0..s1];
                                acc += g.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
                                if let Some(dx) = dx_t.as_mut() {
                                    for (d, gv) in dx.data[s0..s1].iter_mut().zip(g) {
                                        *d += wv * gv;
                                    }
                                }
                            }
                            gw[wi] += acc;
                        }
                    }
                }
            }
        }
        for (g, v) in self.w.get_mut(grads).iter_mut().zip(gw) {
            *g += v;
        }
        for (g, v) in self.b.get_mut(grads).iter_mut().zip(gb) {
            *g += v;
        }
        dx_t
    }
}

/// Non-overlapping max pooling; axes shorter than two are left alone.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MaxPool {
    pub ph: usize,
    pub pw: usize,
}

#[derive(Debug, Clone)]
pub struct PoolCache {
    in_shape: (usize, usize, usize, usize),
    argmax: Vec<usize>,
}

impl MaxPool {
    pub fn for_input(h: usize, w: usize) -> Self {
        Self { ph: if h >= 2 { 2 } else { 1 }, pw: if w >= 2 { 2 } else { 1 } }
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (h / self.ph, w / self.pw)
    }

    pub fn forward(&self, x: &Tensor4) -> (Tensor4, PoolCache) {
        let (oh, ow) = self.out_dims(x.h, x.w);
        let mut y = Tensor4::zeros(x.n, x.c, oh, ow);
        let mut argmax = vec![0; y.data.len()];
        for n in 0..x.n {
            for c in 0..x.c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut bi = 0;
                        for dy in 0..self.ph {
                            for dx in 0..self.pw {
                                let i = x.idx(n, c, oy * self.ph + dy, ox * self.pw + dx);
                                if x.data[i] > best {
                                    best = x.data[i];
                                    bi = i;
                                }
                            }
                        }
                        let o = y.idx(n, c, oy, ox);
                        y.data[o] = best;
                        argmax[o] = bi;
                    }
                }
            }
        }
        (y, PoolCache { in_shape: (x.n, x.c, x.h, x.w), argmax })
    }

    pub fn backward(&self, cache: &PoolCache, dy: &Tensor4) -> Tensor4 {
        let (n, c, h, w) = cache.in_shape;
        let mut dx = Tensor4::zeros(n, c, h, w);
        for (o, &i) in cache.argmax.iter().enumerate() {
            dx.data[i] += dy.data[o];
        }
        dx
    }
}

/// Per-channel running statistics used at inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    pub fn new(c: usize) -> Self {
        Self { mean: vec![0.0; c], var: vec![1.0; c] }
    }

    /// `running ← decay · running + (1 − decay) · batch`.
    pub fn update(&mut self, batch: &BnStats, decay: f64) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = decay * *r + (1.0 - decay) * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = decay * *r + (1.0 - decay) * b;
        }
    }
}

/// Batch normalization over (n, h, w) per channel.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchNorm {
    pub c: usize,
    pub gamma: ParamSlice,
    pub beta: ParamSlice,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    train: bool,
    /// Unbiased batch statistics (train mode only) for the running averages.
    pub batch: Option<BnStats>,
}

impl BatchNorm {
    pub fn new(layout: &mut ParamLayout, c: usize) -> Self {
        Self { c, gamma: layout.alloc(c), beta: layout.alloc(c), eps: 1e-5 }
    }

    pub fn init(&self, params: &mut [f64]) {
        self.gamma.get_mut(params).fill(1.0);
        self.beta.get_mut(params).fill(0.0);
    }

    pub fn forward(&self, params: &[f64], x: &Tensor4, running: &BnStats, train: bool) -> (Tensor4, BnCache) {
        let gamma = self.gamma.get(params);
        let beta = self.beta.get(params);
        let hw = x.h * x.w;
        let m = (x.n * hw) as f64;
        let mut y = x.same_shape();
        let mut xhat = vec![0.0; x.data.len()];
        let mut inv_std = vec![0.0; self.c];
        let mut batch = train.then(|| BnStats::new(self.c));
        for c in 0..self.c {
            let (mean, var) = if train {
                let mut s = 0.0;
                for n in 0..x.n {
                    let b = x.idx(n, c, 0, 0);
                    s += x.data[b..b + hw].iter().sum::<f64>();
                }
                let mean = s / m;
                let mut v = 0.0;
                for n in 0..x.n {
                    let b = x.idx(n, c, 0, 0);
                    v += x.data[b..b + hw].iter().map(|a| (a - mean) * (a - mean)).sum::<f64>();
                }
                let var = v / m;
                if let Some(bs) = batch.as_mut() {
                    bs.mean[c] = mean;
                    bs.var[c] = if m > 1.0 { v / (m - 1.0) } else { var };
                }
                (mean, var)
            } else {
                (running.mean[c], running.var[c])
            };
            let is = 1.0 / libm::sqrt(var + self.eps);
            inv_std[c] = is;
            for n in 0..x.n {
                let b = x.idx(n, c, 0, 0);
                for i in b..b + hw {
                    let h = (x.data[i] - mean) * is;
                    xhat[i] = h;
                    y.data[i] = gamma[c] * h + beta[c];
                }
            }
        }
        (y, BnCache { xhat, inv_std, train, batch })
    }

    pub fn backward(&self, params: &[f64], cache: &BnCache, dy: &Tensor4, grads: &mut [f64]) -> Tensor4 {
        let gamma = self.gamma.get(params);
        let hw = dy.h * dy.w;
        let m = (dy.n * hw) as f64;
        let mut dx = dy.same_shape();
        let mut dgamma = vec![0.0; self.c];
        let mut dbeta = vec![0.0; self.c];
        for c in 0..self.c {
            let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
            for n in 0..dy.n {
                let b = dy.idx(n, c, 0, 0);
                for i in b..b + hw {
                    sum_dy += dy.data[i];
                    sum_dy_xhat += dy.data[i] * cache.xhat[i];
                }
            }
            dgamma[c] = sum_dy_xhat;
            dbeta[c] = sum_dy;
            let k = gamma[c] * cache.inv_std[c];
            for n in 0..dy.n {
                let b = dy.idx(n, c, 0, 0);
                for i in b..b + hw {
                    dx.data[i] = if cache.train {
                        k * (dy.data[i] - sum_dy / m - cache.xhat[i] * sum_dy_xhat / m)
                    } else {
                        k * dy.data[i]
                    };
                }
            }
        }
        for (g, v) in self.gamma.get_mut(grads).iter_mut().zip(dgamma) {
            *g += v;
        }
        for (g, v) in self.beta.get_mut(grads).iter_mut().zip(dbeta) {
            *g += v;
        }
        dx
    }
}

/// Fully connected layer on row-major (n, in) batches.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dense {
    pub nin: usize,
    pub nout: usize,
    pub w: ParamSlice,
    pub b: ParamSlice,
}

impl Dense {
    pub fn new(layout: &mut ParamLayout, nin: usize, nout: usize) -> Self {
        Self { nin, nout, w: layout.alloc(nin * nout), b: layout.alloc(nout) }
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut [f64], gain: f64, rng: &mut R) {
        init_uniform(self.w.get_mut(params), self.nin, gain, rng);
        self.b.get_mut(params).fill(0.0);
    }

    pub fn forward(&self, params: &[f64], x: &[f64], n: usize) -> Vec<f64> {
        let w = self.w.get(params);
        let b = self.b.get(params);
        let mut y = vec![0.0; n * self.nout];
        for r in 0..n {
            let xr = &x[r * self.nin..(r + 1) * self.nin];
            for o in 0..self.nout {
                let wr = &w[o * self.nin..(o + 1) * self.nin];
                y[r * self.nout + o] = b[o] + wr.iter().zip(xr).map(|(a, c)| a * c).sum::<f64>();
            }
        }
        y
    }

    pub fn backward(&self, params: &[f64], x: &[f64], dy: &[f64], n: usize, grads: &mut [f64]) -> Vec<f64> {
        let w = self.w.get(params);
        let mut dx = vec![0.0; n * self.nin];
        {
            let gw = self.w.get_mut(grads);
            for r in 0..n {
                let xr = &x[r * self.nin..(r + 1) * self.nin];
                for o in 0..self.nout {
                    let g = dy[r * self.nout + o];
                    if g == 0.0 {
                        continue;
                    }
                    for (gwv, xv) in gw[o * self.nin..(o + 1) * self.nin].iter_mut().zip(xr) {
                        *gwv += g * xv;
                    }
                    for (d, wv) in dx[r * self.nin..(r + 1) * self.nin].iter_mut().zip(&w[o * self.nin..(o + 1) * self.nin]) {
                        *d += g * wv;
                    }
                }
            }
        }
        let gb = self.b.get_mut(grads);
        for r in 0..n {
            for o in 0..self.nout {
                gb[o] += dy[r * self.nout + o];
            }
        }
        dx
    }
}

/// conv → (batch norm) → leaky ReLU → max pool.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvStage {
    pub conv: Conv2d,
    pub bn: Option<BatchNorm>,
    pub pool: MaxPool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvTrunk {
    pub stages: Vec<ConvStage>,
    pub out_c: usize,
    pub out_h: usize,
    pub out_w: usize,
}

#[derive(Debug, Clone)]
pub struct StageCache {
    input: Tensor4,
    bn: Option<BnCache>,
    pre_act: Tensor4,
    pool: PoolCache,
}

#[derive(Debug, Clone)]
pub struct TrunkCache {
    pub stages: Vec<StageCache>,
}

impl TrunkCache {
    /// Train-mode batch statistics of each normalized stage, in stage order.
    pub fn batch_stats(&self) -> Vec<Option<&BnStats>> {
        self.stages.iter().map(|s| s.bn.as_ref().and_then(|b| b.batch.as_ref())).collect()
    }
}

impl ConvTrunk {
    pub fn new(layout: &mut ParamLayout, in_c: usize, h: usize, w: usize, filters: &[usize], kernel: usize, batch_norm: bool) -> Self {
        let (mut c, mut h, mut w) = (in_c, h, w);
        let stages = filters
            .iter()
            .map(|&f| {
                let conv = Conv2d::new(layout, c, f, kernel);
                let bn = batch_norm.then(|| BatchNorm::new(layout, f));
                let pool = MaxPool::for_input(h, w);
                (h, w) = pool.out_dims(h, w);
                c = f;
                ConvStage { conv, bn, pool }
            })
            .collect();
        Self { stages, out_c: c, out_h: h, out_w: w }
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut [f64], rng: &mut R) {
        for s in &self.stages {
            s.conv.init(params, rng);
            if let Some(bn) = &s.bn {
                bn.init(params);
            }
        }
    }

    pub fn n_bn(&self) -> usize {
        self.stages.iter().filter(|s| s.bn.is_some()).count()
    }

    /// `running` holds one entry per normalized stage.
    pub fn forward(&self, params: &[f64], x: Tensor4, running: &[BnStats], train: bool) -> (Tensor4, TrunkCache) {
        let mut cur = x;
        let mut caches = Vec::with_capacity(self.stages.len());
        let mut bn_i = 0;
        for s in &self.stages {
            let conv_out = s.conv.forward(params, &cur);
            let (pre_act, bn) = match &s.bn {
                Some(bn) => {
                    let (y, c) = bn.forward(params, &conv_out, &running[bn_i], train);
                    bn_i += 1;
                    (y, Some(c))
                }
                None => (conv_out, None),
            };
            let mut act = pre_act.clone();
            act.data.iter_mut().for_each(|v| *v = leaky_relu(*v));
            let (pooled, pool) = s.pool.forward(&act);
            caches.push(StageCache { input: cur, bn, pre_act, pool });
            cur = pooled;
        }
        (cur, TrunkCache { stages: caches })
    }

    pub fn backward(&self, params: &[f64], cache: &TrunkCache, dy: Tensor4, grads: &mut [f64]) {
        let mut g = dy;
        for (i, (s, c)) in self.stages.iter().zip(&cache.stages).enumerate().rev() {
            let mut d = s.pool.backward(&c.pool, &g);
            for (dv, pv) in d.data.iter_mut().zip(&c.pre_act.data) {
                *dv *= leaky_relu_grad(*pv);
            }
            if let (Some(bn), Some(bc)) = (&s.bn, &c.bn) {
                d = bn.backward(params, bc, &d, grads);
            }
            match s.conv.backward(params, &c.input, &d, grads, i > 0) {
                Some(dx) => g = dx,
                None => break,
            }
        }
    }
}
