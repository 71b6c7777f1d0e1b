use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{init_uniform, sigmoid, ParamLayout, ParamSlice};

/// Single-direction LSTM over row-major (n, t, d) sequences. Gate order i, f, g, o.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Lstm {
    pub nin: usize,
    pub hidden: usize,
    pub reverse: bool,
    pub w: ParamSlice,
    pub u: ParamSlice,
    pub b: ParamSlice,
}

#[derive(Debug, Clone)]
pub struct LstmCache {
    n: usize,
    t: usize,
    x: Vec<f64>,
    /// Post-activation gates, (n, t, 4h).
    gates: Vec<f64>,
    /// Cell states, (n, t, h).
    c: Vec<f64>,
    /// Hidden states, (n, t, h); also the layer output.
    pub h: Vec<f64>,
}

impl Lstm {
    pub fn new(layout: &mut ParamLayout, nin: usize, hidden: usize, reverse: bool) -> Self {
        Self {
            nin,
            hidden,
            reverse,
            w: layout.alloc(4 * hidden * nin),
            u: layout.alloc(4 * hidden * hidden),
            b: layout.alloc(4 * hidden),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut [f64], rng: &mut R) {
        init_uniform(self.w.get_mut(params), self.nin, 1.0, rng);
        init_uniform(self.u.get_mut(params), self.hidden, 1.0, rng);
        let b = self.b.get_mut(params);
        b.fill(0.0);
        b[self.hidden..2 * self.hidden].fill(1.0);
    }

    fn order(&self, t: usize) -> impl Iterator<Item = usize> {
        let rev = self.reverse;
        (0..t).map(move |s| if rev { t - 1 - s } else { s })
    }

    pub fn forward(&self, params: &[f64], x: &[f64], n: usize, t: usize) -> LstmCache {
        let (d, h) = (self.nin, self.hidden);
        assert_eq!(x.len(), n * t * d);
        let w = self.w.get(params);
        let u = self.u.get(params);
        let b = self.b.get(params);
        let mut gates = vec![0.0; n * t * 4 * h];
        let mut cs = vec![0.0; n * t * h];
        let mut hs = vec![0.0; n * t * h];
        let mut a = vec![0.0; 4 * h];
        for bi in 0..n {
            let mut h_prev = vec![0.0; h];
            let mut c_prev = vec![0.0; h];
            for ti in self.order(t) {
                let xt = &x[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                for (j, aj) in a.iter_mut().enumerate() {
                    let wr = &w[j * d..(j + 1) * d];
                    let ur = &u[j * h..(j + 1) * h];
                    *aj = b[j]
                        + wr.iter().zip(xt).map(|(p, q)| p * q).sum::<f64>()
                        + ur.iter().zip(&h_prev).map(|(p, q)| p * q).sum::<f64>();
                }
                let g = &mut gates[(bi * t + ti) * 4 * h..(bi * t + ti + 1) * 4 * h];
                for k in 0..h {
                    let ig = sigmoid(a[k]);
                    let fg = sigmoid(a[h + k]);
                    let gg = libm::tanh(a[2 * h + k]);
                    let og = sigmoid(a[3 * h + k]);
                    g[k] = ig;
                    g[h + k] = fg;
                    g[2 * h + k] = gg;
                    g[3 * h + k] = og;
                    let c = fg * c_prev[k] + ig * gg;
                    c_prev[k] = c;
                    h_prev[k] = og * libm::tanh(c);
                }
                cs[(bi * t + ti) * h..(bi * t + ti + 1) * h].copy_from_slice(&c_prev);
                hs[(bi * t + ti) * h..(bi * t + ti + 1) * h].copy_from_slice(&h_prev);
            }
        }
        LstmCache { n, t, x: x.to_vec(), gates, c: cs, h: hs }
    }

    /// Backpropagation through time; `dh` is the gradient on every output state.
    pub fn backward(&self, params: &[f64], cache: &LstmCache, dh: &[f64], grads: &mut [f64]) -> Vec<f64> {
        let (d, h, n, t) = (self.nin, self.hidden, cache.n, cache.t);
        let w = self.w.get(params);
        let u = self.u.get(params);
        let mut dx = vec![0.0; n * t * d];
        let mut gw = vec![0.0; w.len()];
        let mut gu = vec![0.0; u.len()];
        let mut gb = vec![0.0; 4 * h];
        let mut da = vec![0.0; 4 * h];
        let steps: Vec<usize> = self.order(t).collect();
        for bi in 0..n {
            let mut dh_next = vec![0.0; h];
            let mut dc_next = vec![0.0; h];
            for (s, &ti) in steps.iter().enumerate().rev() {
                let row = bi * t + ti;
                let prev = (s > 0).then(|| bi * t + steps[s - 1]);
                let g = &cache.gates[row * 4 * h..(row + 1) * 4 * h];
                for k in 0..h {
                    let (ig, fg, gg, og) = (g[k], g[h + k], g[2 * h + k], g[3 * h + k]);
                    let c = cache.c[row * h + k];
                    let c_prev = prev.map_or(0.0, |p| cache.c[p * h + k]);
                    let tc = libm::tanh(c);
                    let dht = dh[row * h + k] + dh_next[k];
                    let dc = dht * og * (1.0 - tc * tc) + dc_next[k];
                    da[k] = dc * gg * ig * (1.0 - ig);
                    da[h + k] = dc * c_prev * fg * (1.0 - fg);
                    da[2 * h + k] = dc * ig * (1.0 - gg * gg);
                    da[3 * h + k] = dht * tc * og * (1.0 - og);
                    dc_next[k] = dc * fg;
                }
                let xt = &cache.x[row * d..(row + 1) * d];
                let h_prev: &[f64] = match prev {
                    Some(p) => &cache.h[p * h..(p + 1) * h],
                    None => &[],
                };
                dh_next.fill(0.0);
                let dxt = &mut dx[row * d..(row + 1) * d];
                for (j, &aj) in da.iter().enumerate() {
                    gb[j] += aj;
                    let wr = &w[j * d..(j + 1) * d];
                    for k in 0..d {
                        gw[j * d + k] += aj * xt[k];
                        dxt[k] += aj * wr[k];
                    }
                    if !h_prev.is_empty() {
                        let ur = &u[j * h..(j + 1) * h];
                        for k in 0..h {
                            gu[j * h + k] += aj * h_prev[k];
                            dh_next[k] += aj * ur[k];
                        }
                    }
                }
            }
        }
        for (slice, g) in [(self.w, gw), (self.u, gu), (self.b, gb)] {
            for (dst, v) in slice.get_mut(grads).iter_mut().zip(g) {
                *dst += v;
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testing::{max_rel_error, numeric_grad};
    use rand::SeedableRng;

    fn check(reverse: bool) {
        let mut layout = ParamLayout::default();
        let lstm = Lstm::new(&mut layout, 3, 4, reverse);
        let mut params = vec![0.0; layout.len()];
        let mut rng = crate::RunRng::seed_from_u64(11);
        lstm.init(&mut params, &mut rng);
        let (n, t) = (2, 5);
        let x: Vec<f64> = (0..n * t * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let coeff: Vec<f64> = (0..n * t * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |p: &[f64], x: &[f64]| {
            lstm.forward(p, x, n, t).h.iter().zip(&coeff).map(|(a, b)| a * b).sum::<f64>()
        };
        let cache = lstm.forward(&params, &x, n, t);
        let mut grads = vec![0.0; params.len()];
        let dx = lstm.backward(&params, &cache, &coeff, &mut grads);
        let num = numeric_grad(&params, 1e-5, |p| loss(p, &x));
        assert!(max_rel_error(&grads, &num, 1e-6) < 1e-5);
        let num_x = numeric_grad(&x, 1e-5, |xx| loss(&params, xx));
        assert!(max_rel_error(&dx, &num_x, 1e-6) < 1e-5);
    }

    #[test]
    fn forward_direction_gradients() {
        check(false);
    }

    #[test]
    fn reverse_direction_gradients() {
        check(true);
    }

    #[test]
    fn reverse_reads_sequence_backwards() {
        let mut layout = ParamLayout::default();
        let fwd = Lstm::new(&mut layout, 1, 2, false);
        let mut params = vec![0.0; layout.len()];
        fwd.init(&mut params, &mut crate::RunRng::seed_from_u64(3));
        let rev = Lstm { reverse: true, ..fwd.clone() };
        let x = [0.5, -0.2, 0.9];
        let xr = [0.9, -0.2, 0.5];
        let a = fwd.forward(&params, &x, 1, 3).h;
        let b = rev.forward(&params, &xr, 1, 3).h;
        assert_eq!(&a[4..6], &b[0..2]);
    }
}
