//! Encoder-decoder network with autoregressive decoding.
//!
//! The decoder starts from the last observed value of its feedback columns and
//! at every step emits an increment added to the previous output. The previous
//! output, re-standardized, is the decoder input of the next step.

use ndarray::{s, Array1, Array2, Array3, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lstm::{add_assign, glorot, LstmParams, StepCache};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub input_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub hidden_units: usize,
    pub dense_units: usize,
    pub output_dim: usize,
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if [
            self.input_dim,
            self.encoder_layers,
            self.decoder_layers,
            self.hidden_units,
            self.dense_units,
            self.output_dim,
        ]
        .contains(&0)
        {
            return Err(Error::config(format!("network sizes must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// How decoder outputs map back to input-space values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feedback {
    /// Input column whose last observed value seeds each output channel.
    pub bootstrap_columns: Vec<usize>,
    /// Standardization of each output channel when fed back.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub encoder: Vec<LstmParams>,
    pub decoder: Vec<LstmParams>,
    pub dense_w: Array2<f64>,
    pub dense_b: Array1<f64>,
    pub out_w: Array2<f64>,
    pub out_b: Array1<f64>,
}

impl Params {
    pub fn zeros_like(&self) -> Self {
        Self {
            encoder: self.encoder.iter().map(LstmParams::zeros_like).collect(),
            decoder: self.decoder.iter().map(LstmParams::zeros_like).collect(),
            dense_w: Array2::zeros(self.dense_w.raw_dim()),
            dense_b: Array1::zeros(self.dense_b.raw_dim()),
            out_w: Array2::zeros(self.out_w.raw_dim()),
            out_b: Array1::zeros(self.out_b.raw_dim()),
        }
    }

    /// Named tensors in a fixed order, with their shapes.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (part, layers) in [("encoder", &self.encoder), ("decoder", &self.decoder)] {
            for (i, l) in layers.iter().enumerate() {
                out.push((format!("{part}.{i}.w"), l.w.shape().to_vec(), l.w.as_slice().unwrap()));
                out.push((format!("{part}.{i}.u"), l.u.shape().to_vec(), l.u.as_slice().unwrap()));
                out.push((format!("{part}.{i}.b"), l.b.shape().to_vec(), l.b.as_slice().unwrap()));
            }
        }
        out.push(("dense.w".into(), self.dense_w.shape().to_vec(), self.dense_w.as_slice().unwrap()));
        out.push(("dense.b".into(), self.dense_b.shape().to_vec(), self.dense_b.as_slice().unwrap()));
        out.push(("out.w".into(), self.out_w.shape().to_vec(), self.out_w.as_slice().unwrap()));
        out.push(("out.b".into(), self.out_b.shape().to_vec(), self.out_b.as_slice().unwrap()));
        out
    }

    /// Mutable views in the same order as [`Params::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for layers in [&mut self.encoder, &mut self.decoder] {
            for l in layers.iter_mut() {
                out.push(l.w.as_slice_mut().unwrap());
                out.push(l.u.as_slice_mut().unwrap());
                out.push(l.b.as_slice_mut().unwrap());
            }
        }
        out.push(self.dense_w.as_slice_mut().unwrap());
        out.push(self.dense_b.as_slice_mut().unwrap());
        out.push(self.out_w.as_slice_mut().unwrap());
        out.push(self.out_b.as_slice_mut().unwrap());
        out
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|t| t.2.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.2.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seq2Seq {
    pub config: NetConfig,
    pub feedback: Feedback,
    pub params: Params,
}

/// Recurrent state of every decoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub h: Vec<Array2<f64>>,
    pub c: Vec<Array2<f64>>,
}

pub struct ForwardCache {
    encoder: Vec<Vec<StepCache>>,
    decoder: Vec<Vec<StepCache>>,
    top_hidden: Vec<Array2<f64>>,
    dense: Vec<Array2<f64>>,
}

impl Seq2Seq {
    pub fn new(config: NetConfig, feedback: Feedback, seed: u64) -> Result<Self> {
        config.validate()?;
        let out = config.output_dim;
        if feedback.bootstrap_columns.len() != out
            || feedback.mean.len() != out
            || feedback.std.len() != out
        {
            return Err(Error::config("feedback description must have one entry per output"));
        }
        if feedback.bootstrap_columns.iter().any(|&c| c >= config.input_dim)
            || feedback.std.iter().any(|s| !(*s > 0.0))
        {
            return Err(Error::config("invalid feedback columns or scale"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden_units;
        let encoder = (0..config.encoder_layers)
            .map(|l| LstmParams::new(&mut rng, if l == 0 { config.input_dim } else { h }, h))
            .collect();
        let decoder = (0..config.decoder_layers)
            .map(|l| LstmParams::new(&mut rng, if l == 0 { out } else { h }, h))
            .collect();
        let params = Params {
            encoder,
            decoder,
            dense_w: glorot(&mut rng, h, config.dense_units),
            dense_b: Array1::zeros(config.dense_units),
            out_w: glorot(&mut rng, config.dense_units, out),
            out_b: Array1::zeros(out),
        };
        Ok(Self {
            config,
            feedback,
            params,
        })
    }

    fn check_input(&self, inputs: &ArrayView3<f64>) -> Result<()> {
        let (_, t, d) = inputs.dim();
        if t == 0 || d != self.config.input_dim {
            return Err(Error::contract(format!(
                "input window has shape (_, {t}, {d}), model expects (_, T>0, {})",
                self.config.input_dim
            )));
        }
        Ok(())
    }

    /// Raw (unstandardized) last observed value of each output channel.
    pub fn bootstrap(&self, inputs: ArrayView3<f64>) -> Array2<f64> {
        let (b, t, _) = inputs.dim();
        let fb = &self.feedback;
        Array2::from_shape_fn((b, self.config.output_dim), |(i, k)| {
            inputs[[i, t - 1, fb.bootstrap_columns[k]]] * fb.std[k] + fb.mean[k]
        })
    }

    fn feed(&self, y_prev: &Array2<f64>) -> Array2<f64> {
        let fb = &self.feedback;
        let mut x = y_prev.clone();
        for mut row in x.rows_mut() {
            for k in 0..row.len() {
                row[k] = (row[k] - fb.mean[k]) / fb.std[k];
            }
        }
        x
    }

    fn zero_state(&self, batch: usize, layers: usize) -> (Vec<Array2<f64>>, Vec<Array2<f64>>) {
        let h = self.config.hidden_units;
        (
            (0..layers).map(|_| Array2::zeros((batch, h))).collect(),
            (0..layers).map(|_| Array2::zeros((batch, h))).collect(),
        )
    }

    fn seed_decoder(&self, h: &[Array2<f64>], c: &[Array2<f64>]) -> DecoderState {
        let last = self.config.encoder_layers - 1;
        DecoderState {
            h: (0..self.config.decoder_layers).map(|l| h[l.min(last)].clone()).collect(),
            c: (0..self.config.decoder_layers).map(|l| c[l.min(last)].clone()).collect(),
        }
    }

    /// Run the encoder and return the initial decoder state.
    pub fn encode(&self, inputs: ArrayView3<f64>) -> Result<DecoderState> {
        self.check_input(&inputs)?;
        let (b, t, _) = inputs.dim();
        let (mut h, mut c) = self.zero_state(b, self.config.encoder_layers);
        for step in 0..t {
            let mut x = inputs.slice(s![.., step, ..]).to_owned();
            for (l, layer) in self.params.encoder.iter().enumerate() {
                let (hn, cn) = layer.step(x.view(), h[l].view(), c[l].view());
                x = hn.clone();
                h[l] = hn;
                c[l] = cn;
            }
        }
        Ok(self.seed_decoder(&h, &c))
    }

    /// One decoder step from an explicit previous output (raw units).
    pub fn decode_one(&self, state: &DecoderState, y_prev: &Array2<f64>) -> (DecoderState, Array2<f64>) {
        let mut x = self.feed(y_prev);
        let mut next = state.clone();
        for (l, layer) in self.params.decoder.iter().enumerate() {
            let (hn, cn) = layer.step(x.view(), state.h[l].view(), state.c[l].view());
            x = hn.clone();
            next.h[l] = hn;
            next.c[l] = cn;
        }
        let p = &self.params;
        let mut a = x.dot(&p.dense_w) + &p.dense_b;
        a.mapv_inplace(f64::tanh);
        let y = a.dot(&p.out_w) + &p.out_b + y_prev;
        (next, y)
    }

    /// Autoregressive prediction, output shape (B, horizon, output_dim).
    pub fn predict(&self, inputs: ArrayView3<f64>, horizon: usize) -> Result<Array3<f64>> {
        let mut state = self.encode(inputs)?;
        let mut y = self.bootstrap(inputs);
        let mut out = Array3::zeros((inputs.dim().0, horizon, self.config.output_dim));
        for j in 0..horizon {
            let (s, yn) = self.decode_one(&state, &y);
            out.slice_mut(s![.., j, ..]).assign(&yn);
            state = s;
            y = yn;
        }
        Ok(out)
    }

    /// Forward pass keeping everything needed for backpropagation.
    pub fn forward(&self, inputs: ArrayView3<f64>, horizon: usize) -> Result<(Array3<f64>, ForwardCache)> {
        self.check_input(&inputs)?;
        let (b, t, _) = inputs.dim();
        let p = &self.params;
        let (mut h, mut c) = self.zero_state(b, self.config.encoder_layers);
        let mut enc_cache: Vec<Vec<StepCache>> = vec![Vec::with_capacity(t); self.config.encoder_layers];
        for step in 0..t {
            let mut x = inputs.slice(s![.., step, ..]).to_owned();
            for (l, layer) in p.encoder.iter().enumerate() {
                let (hn, cn, cache) = layer.step_cached(x.view(), h[l].view(), c[l].view());
                enc_cache[l].push(cache);
                x = hn.clone();
                h[l] = hn;
                c[l] = cn;
            }
        }
        let mut state = self.seed_decoder(&h, &c);
        let mut y = self.bootstrap(inputs);
        let mut out = Array3::zeros((b, horizon, self.config.output_dim));
        let mut dec_cache: Vec<Vec<StepCache>> = vec![Vec::with_capacity(horizon); self.config.decoder_layers];
        let mut top_hidden = Vec::with_capacity(horizon);
        let mut dense = Vec::with_capacity(horizon);
        for j in 0..horizon {
            let mut x = self.feed(&y);
            for (l, layer) in p.decoder.iter().enumerate() {
                let (hn, cn, cache) = layer.step_cached(x.view(), state.h[l].view(), state.c[l].view());
                dec_cache[l].push(cache);
                x = hn.clone();
                state.h[l] = hn;
                state.c[l] = cn;
            }
            let mut a = x.dot(&p.dense_w) + &p.dense_b;
            a.mapv_inplace(f64::tanh);
            y = a.dot(&p.out_w) + &p.out_b + &y;
            out.slice_mut(s![.., j, ..]).assign(&y);
            top_hidden.push(x);
            dense.push(a);
        }
        Ok((
            out,
            ForwardCache {
                encoder: enc_cache,
                decoder: dec_cache,
                top_hidden,
                dense,
            },
        ))
    }

    /// Gradients of a loss given its gradient w.r.t. every output.
    pub fn backward(&self, cache: &ForwardCache, d_out: ArrayView3<f64>) -> Params {
        let p = &self.params;
        let mut grad = p.zeros_like();
        let (b, horizon, out_dim) = d_out.dim();
        let hd = self.config.hidden_units;
        let n_dec = self.config.decoder_layers;
        let n_enc = self.config.encoder_layers;
        let mut dh: Vec<Array2<f64>> = (0..n_dec).map(|_| Array2::zeros((b, hd))).collect();
        let mut dc: Vec<Array2<f64>> = (0..n_dec).map(|_| Array2::zeros((b, hd))).collect();
        let mut g_future: Array2<f64> = Array2::zeros((b, out_dim));

        for j in (0..horizon).rev() {
            let gy = &d_out.slice(s![.., j, ..]) + &g_future;
            let a = &cache.dense[j];
            grad.out_w += &a.t().dot(&gy);
            grad.out_b += &gy.sum_axis(Axis(0));
            let da = gy.dot(&p.out_w.t());
            let dpre = &da * &a.mapv(|v| 1.0 - v * v);
            grad.dense_w += &cache.top_hidden[j].t().dot(&dpre);
            grad.dense_b += &dpre.sum_axis(Axis(0));
            add_assign(&mut dh[n_dec - 1], &dpre.dot(&p.dense_w.t()));
            let mut dx_feed = None;
            for l in (0..n_dec).rev() {
                let (dx, dhp, dcp) =
                    p.decoder[l].step_backward(&cache.decoder[l][j], &dh[l], &dc[l], &mut grad.decoder[l], true);
                dh[l] = dhp;
                dc[l] = dcp;
                let dx = dx.expect("requested");
                if l > 0 {
                    add_assign(&mut dh[l - 1], &dx);
                } else {
                    dx_feed = Some(dx);
                }
            }
            let mut dfeed = dx_feed.expect("decoder has a first layer");
            for mut row in dfeed.rows_mut() {
                for k in 0..out_dim {
                    row[k] /= self.feedback.std[k];
                }
            }
            g_future = gy + dfeed;
        }

        let mut dh_e: Vec<Array2<f64>> = (0..n_enc).map(|_| Array2::zeros((b, hd))).collect();
        let mut dc_e: Vec<Array2<f64>> = (0..n_enc).map(|_| Array2::zeros((b, hd))).collect();
        for l in 0..n_dec {
            let e = l.min(n_enc - 1);
            add_assign(&mut dh_e[e], &dh[l]);
            add_assign(&mut dc_e[e], &dc[l]);
        }
        let t = cache.encoder[0].len();
        for step in (0..t).rev() {
            for l in (0..n_enc).rev() {
                let (dx, dhp, dcp) =
                    p.encoder[l].step_backward(&cache.encoder[l][step], &dh_e[l], &dc_e[l], &mut grad.encoder[l], l > 0);
                dh_e[l] = dhp;
                dc_e[l] = dcp;
                if let Some(dx) = dx {
                    add_assign(&mut dh_e[l - 1], &dx);
                }
            }
        }
        grad
    }
}
