//! Point trajectory prediction, the constant-velocity Kalman baseline and
//! displacement-error evaluation.

pub mod kalman;
pub mod metrics;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::{Scaler, SequenceSample};
use crate::nn::{self, Feedback, NetConfig, Objective, SeqData, Seq2Seq, TrainConfig, TrainHistory};

pub use kalman::{kf_predict, kf_predict_window, KalmanConfig};
pub use metrics::{ed_per_step, evaluate_ed, ErrorReport, Segment, REPORT_STEPS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PointModelConfig {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub hidden_units: usize,
    pub dense_units: usize,
    pub training: TrainConfig,
}

impl Default for PointModelConfig {
    fn default() -> Self {
        Self {
            encoder_layers: 1,
            decoder_layers: 1,
            hidden_units: 300,
            dense_units: 300,
            training: TrainConfig::default(),
        }
    }
}

impl PointModelConfig {
    pub fn net(&self, input_dim: usize) -> NetConfig {
        NetConfig {
            input_dim,
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            hidden_units: self.hidden_units,
            dense_units: self.dense_units,
            output_dim: 2,
        }
    }
}

/// Stack windows into an (N, T, d) tensor.
pub fn stack_inputs<'a>(samples: impl IntoIterator<Item = &'a SequenceSample>) -> Result<Array3<f64>> {
    let views: Vec<ArrayView2<f64>> = samples.into_iter().map(|s| s.input.view()).collect();
    if views.is_empty() {
        return Err(Error::contract("no windows to stack"));
    }
    ndarray::stack(Axis(0), &views).map_err(|e| Error::contract(format!("windows differ in shape: {e}")))
}

/// Inputs plus targets built from the given target columns (0 = y, 1 = x).
pub fn seq_data(samples: &[SequenceSample], target_columns: &[usize]) -> Result<SeqData> {
    let inputs = stack_inputs(samples)?;
    let horizon = samples[0].target.nrows();
    let mut targets = Array3::zeros((samples.len(), horizon, target_columns.len()));
    for (i, smp) in samples.iter().enumerate() {
        if smp.target.nrows() != horizon {
            return Err(Error::contract("targets differ in length"));
        }
        for (k, &c) in target_columns.iter().enumerate() {
            targets.slice_mut(s![i, .., k]).assign(&smp.target.column(c));
        }
    }
    Ok(SeqData { inputs, targets })
}

/// A trained sequence network plus the bookkeeping needed to reload it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedNet {
    pub net: Seq2Seq,
    pub horizon: usize,
    pub scaler_hash: String,
    pub seed: u64,
    pub training: TrainConfig,
    pub history: TrainHistory,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NetMeta<E> {
    net: NetConfig,
    feedback: Feedback,
    horizon: usize,
    scaler_hash: String,
    seed: u64,
    training: TrainConfig,
    history: TrainHistory,
    #[serde(flatten)]
    extra: E,
}

impl TrainedNet {
    pub fn train(
        config: NetConfig,
        feedback: Feedback,
        objective: &Objective,
        train: &SeqData,
        val: &SeqData,
        training: &TrainConfig,
        scaler: &Scaler,
        seed: u64,
    ) -> Result<Self> {
        let mut net = Seq2Seq::new(config, feedback, seed)?;
        let history = nn::fit(&mut net, objective, train, val, training, seed.wrapping_add(1))?;
        Ok(Self {
            net,
            horizon: train.targets.dim().1,
            scaler_hash: scaler.hash(),
            seed,
            training: training.clone(),
            history,
        })
    }

    pub fn predict(&self, windows: ndarray::ArrayView3<f64>) -> Result<Array3<f64>> {
        let mut out = Array3::zeros((windows.dim().0, self.horizon, self.net.config.output_dim));
        let chunk = 256;
        let mut start = 0;
        while start < windows.dim().0 {
            let end = (start + chunk).min(windows.dim().0);
            let p = self.net.predict(windows.slice(s![start..end, .., ..]), self.horizon)?;
            out.slice_mut(s![start..end, .., ..]).assign(&p);
            start = end;
        }
        Ok(out)
    }

    pub fn save<E: Serialize>(&self, dir: &Path, extra: E) -> Result<()> {
        let meta = NetMeta {
            net: self.net.config.clone(),
            feedback: self.net.feedback.clone(),
            horizon: self.horizon,
            scaler_hash: self.scaler_hash.clone(),
            seed: self.seed,
            training: self.training.clone(),
            history: self.history.clone(),
            extra,
        };
        nn::save_checkpoint(dir, &self.net.params, &meta)
    }

    pub fn load<E: serde::de::DeserializeOwned>(dir: &Path) -> Result<(Self, E)> {
        let meta: NetMeta<E> = nn::read_checkpoint_meta(dir)?;
        let mut net = Seq2Seq::new(meta.net, meta.feedback, 0)?;
        nn::read_checkpoint_params(dir, &mut net.params)?;
        Ok((
            Self {
                net,
                horizon: meta.horizon,
                scaler_hash: meta.scaler_hash,
                seed: meta.seed,
                training: meta.training,
                history: meta.history,
            },
            meta.extra,
        ))
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
struct PointTag {
    point: bool,
}

/// Encoder-decoder predicting future (y, x) positions in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct PointModel(pub TrainedNet);

impl PointModel {
    pub fn train(
        train: &[SequenceSample],
        val: &[SequenceSample],
        config: &PointModelConfig,
        scaler: &Scaler,
        seed: u64,
    ) -> Result<Self> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::contract("point model needs non-empty train and validation splits"));
        }
        let (mean, std) = scaler.position_stats();
        let feedback = Feedback {
            bootstrap_columns: vec![0, 1],
            mean: mean.to_vec(),
            std: std.to_vec(),
        };
        let tr = seq_data(train, &[0, 1])?;
        let va = seq_data(val, &[0, 1])?;
        let d = tr.inputs.dim().2;
        TrainedNet::train(config.net(d), feedback, &Objective::Mse, &tr, &va, &config.training, scaler, seed).map(Self)
    }

    /// L×2 predicted (y, x) for one standardized window.
    pub fn predict_trajectory(&self, window: ArrayView2<f64>) -> Result<Array2<f64>> {
        let out = self.0.net.predict(window.insert_axis(Axis(0)), self.0.horizon)?;
        Ok(out.index_axis_move(Axis(0), 0))
    }

    pub fn predict_batch(&self, windows: ndarray::ArrayView3<f64>) -> Result<Array3<f64>> {
        self.0.predict(windows)
    }

    pub fn horizon(&self) -> usize {
        self.0.horizon
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.0.save(dir, PointTag { point: true })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (net, tag): (TrainedNet, PointTag) = TrainedNet::load(dir)?;
        if !tag.point || net.net.config.output_dim != 2 {
            return Err(Error::contract(format!("{} does not hold a point model", dir.display())));
        }
        Ok(Self(net))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureLayout;
    use ndarray::Array2;

    fn toy_samples(n: usize, t: usize, l: usize, d: usize) -> Vec<SequenceSample> {
        (0..n)
            .map(|i| SequenceSample {
                vehicle_id: crate::world::VehicleId(i as u32),
                anchor_time: 0.0,
                input: Array2::from_shape_fn((t, d), |(a, b)| ((i + a * 3 + b) % 7) as f64 * 0.1),
                target: Array2::from_shape_fn((l, 2), |(a, b)| (a + b + i) as f64 * 0.2),
                turning: false,
            })
            .collect()
    }

    #[test]
    fn seq_data_selects_target_columns() {
        let s = toy_samples(3, 4, 5, 6);
        let d = seq_data(&s, &[1, 1]).unwrap();
        assert_eq!(d.inputs.dim(), (3, 4, 6));
        assert_eq!(d.targets.dim(), (3, 5, 2));
        assert_eq!(d.targets[[2, 3, 0]], s[2].target[[3, 1]]);
        assert_eq!(d.targets[[2, 3, 1]], s[2].target[[3, 1]]);
        assert!(seq_data(&[], &[0]).is_err());
    }

    #[test]
    fn point_model_shapes_determinism_and_checkpoint() {
        let layout = FeatureLayout::new(2);
        let d = layout.dim();
        let s = toy_samples(6, 5, 4, d);
        let scaler = Scaler::fit(&s, &layout).unwrap();
        let cfg = PointModelConfig {
            hidden_units: 6,
            dense_units: 5,
            training: TrainConfig {
                max_epochs: 2,
                batch_size: 3,
                ..TrainConfig::default()
            },
            ..PointModelConfig::default()
        };
        let m = PointModel::train(&s, &s, &cfg, &scaler, 3).unwrap();
        let p1 = m.predict_trajectory(s[0].input.view()).unwrap();
        let p2 = m.predict_trajectory(s[0].input.view()).unwrap();
        assert_eq!(p1.dim(), (4, 2));
        assert_eq!(p1, p2);
        assert!(p1.iter().all(|v| v.is_finite()));
        let bad = Array2::zeros((5, d + 1));
        assert!(matches!(m.predict_trajectory(bad.view()), Err(Error::Contract(_))));

        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let back = PointModel::load(dir.path()).unwrap();
        assert_eq!(back, m);
        let again = PointModel::train(&s, &s, &cfg, &scaler, 3).unwrap();
        assert_eq!(again, m);
    }
}
