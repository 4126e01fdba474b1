//! Batched LSTM cell with gate order [input, forget, candidate, output].

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    /// in × 4H
    pub w: Array2<f64>,
    /// H × 4H
    pub u: Array2<f64>,
    /// 4H
    pub b: Array1<f64>,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn glorot<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit))
}

#[derive(Debug, Clone)]
pub struct StepCache {
    x: Array2<f64>,
    h_prev: Array2<f64>,
    c_prev: Array2<f64>,
    /// Activated gates, B × 4H.
    gates: Array2<f64>,
    tanh_c: Array2<f64>,
}

impl LstmParams {
    pub fn new<R: Rng>(rng: &mut R, input: usize, hidden: usize) -> Self {
        let mut b = Array1::zeros(4 * hidden);
        b.slice_mut(s![hidden..2 * hidden]).fill(1.0);
        Self {
            w: glorot(rng, input, 4 * hidden),
            u: glorot(rng, hidden, 4 * hidden),
            b,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w: Array2::zeros(self.w.raw_dim()),
            u: Array2::zeros(self.u.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
        }
    }

    pub fn hidden(&self) -> usize {
        self.u.nrows()
    }

    pub fn input(&self) -> usize {
        self.w.nrows()
    }

    fn preactivation(&self, x: ArrayView2<f64>, h: ArrayView2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.w);
        z += &h.dot(&self.u);
        z += &self.b;
        z
    }

    fn activate(z: &mut Array2<f64>, hidden: usize) {
        for mut row in z.rows_mut() {
            for (k, v) in row.iter_mut().enumerate() {
                *v = if (2 * hidden..3 * hidden).contains(&k) {
                    v.tanh()
                } else {
                    sigmoid(*v)
                };
            }
        }
    }

    /// One step without caching. Returns (h, c).
    pub fn step(
        &self,
        x: ArrayView2<f64>,
        h: ArrayView2<f64>,
        c: ArrayView2<f64>,
    ) -> (Array2<f64>, Array2<f64>) {
        let hd = self.hidden();
        let mut g = self.preactivation(x, h);
        Self::activate(&mut g, hd);
        let mut c_new = Array2::zeros(c.raw_dim());
        let mut h_new = Array2::zeros(c.raw_dim());
        for b in 0..c.nrows() {
            let gr = g.row(b);
            for k in 0..hd {
                let cv = gr[hd + k] * c[[b, k]] + gr[k] * gr[2 * hd + k];
                c_new[[b, k]] = cv;
                h_new[[b, k]] = gr[3 * hd + k] * cv.tanh();
            }
        }
        (h_new, c_new)
    }

    pub fn step_cached(
        &self,
        x: ArrayView2<f64>,
        h: ArrayView2<f64>,
        c: ArrayView2<f64>,
    ) -> (Array2<f64>, Array2<f64>, StepCache) {
        let hd = self.hidden();
        let mut g = self.preactivation(x, h);
        Self::activate(&mut g, hd);
        let mut c_new = Array2::zeros(c.raw_dim());
        let mut h_new = Array2::zeros(c.raw_dim());
        let mut tanh_c = Array2::zeros(c.raw_dim());
        for b in 0..c.nrows() {
            let gr = g.row(b);
            for k in 0..hd {
                let cv = gr[hd + k] * c[[b, k]] + gr[k] * gr[2 * hd + k];
                let tc = cv.tanh();
                c_new[[b, k]] = cv;
                tanh_c[[b, k]] = tc;
                h_new[[b, k]] = gr[3 * hd + k] * tc;
            }
        }
        let cache = StepCache {
            x: x.to_owned(),
            h_prev: h.to_owned(),
            c_prev: c.to_owned(),
            gates: g,
            tanh_c,
        };
        (h_new, c_new, cache)
    }

    /// Backward through one step. `dh` and `dc` are gradients w.r.t. the step's
    /// outputs. Accumulates parameter gradients into `grad`; returns
    /// (dx, dh_prev, dc_prev). `dx` is skipped when `need_dx` is false.
    pub fn step_backward(
        &self,
        cache: &StepCache,
        dh: &Array2<f64>,
        dc: &Array2<f64>,
        grad: &mut LstmParams,
        need_dx: bool,
    ) -> (Option<Array2<f64>>, Array2<f64>, Array2<f64>) {
        let hd = self.hidden();
        let bsz = dh.nrows();
        let mut dz = Array2::zeros((bsz, 4 * hd));
        let mut dc_prev = Array2::zeros((bsz, hd));
        for b in 0..bsz {
            let g = cache.gates.row(b);
            for k in 0..hd {
                let (i, f, gg, o) = (g[k], g[hd + k], g[2 * hd + k], g[3 * hd + k]);
                let tc = cache.tanh_c[[b, k]];
                let dhv = dh[[b, k]];
                let dcv = dc[[b, k]] + dhv * o * (1.0 - tc * tc);
                dz[[b, k]] = dcv * gg * i * (1.0 - i);
                dz[[b, hd + k]] = dcv * cache.c_prev[[b, k]] * f * (1.0 - f);
                dz[[b, 2 * hd + k]] = dcv * i * (1.0 - gg * gg);
                dz[[b, 3 * hd + k]] = dhv * tc * o * (1.0 - o);
                dc_prev[[b, k]] = dcv * f;
            }
        }
        grad.w += &cache.x.t().dot(&dz);
        grad.u += &cache.h_prev.t().dot(&dz);
        grad.b += &dz.sum_axis(Axis(0));
        let dh_prev = dz.dot(&self.u.t());
        let dx = need_dx.then(|| dz.dot(&self.w.t()));
        (dx, dh_prev, dc_prev)
    }
}

/// Element-wise `a += b` for same-shaped arrays.
pub(crate) fn add_assign(a: &mut Array2<f64>, b: &Array2<f64>) {
    Zip::from(a).and(b).for_each(|x, y| *x += y);
}
