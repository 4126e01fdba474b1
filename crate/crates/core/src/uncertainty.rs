//! Per-axis quantile encoder-decoders giving lower/upper trajectory bounds,
//! plus empirical coverage of those bounds.

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::{Scaler, SequenceSample};
use crate::nn::{Feedback, NetConfig, Objective, TrainConfig};
use crate::predictor::{seq_data, TrainedNet};

pub use crate::nn::pinball as pinball_loss;

/// Position axis: `Lat` is the northing y (column 0), `Lon` the easting x (column 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis2 {
    Lat,
    Lon,
}

impl Axis2 {
    pub const BOTH: [Axis2; 2] = [Axis2::Lat, Axis2::Lon];

    pub fn column(self) -> usize {
        match self {
            Axis2::Lat => 0,
            Axis2::Lon => 1,
        }
    }
}

impl std::str::FromStr for Axis2 {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lat" | "y" => Ok(Axis2::Lat),
            "lon" | "x" => Ok(Axis2::Lon),
            _ => Err(Error::config(format!("unknown axis `{s}` (expected lat or lon)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantileModelConfig {
    pub lower: f64,
    pub upper: f64,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub hidden_units: usize,
    pub dense_units: usize,
    pub training: TrainConfig,
}

impl Default for QuantileModelConfig {
    fn default() -> Self {
        Self {
            lower: 0.1,
            upper: 0.9,
            encoder_layers: 1,
            decoder_layers: 1,
            hidden_units: 320,
            dense_units: 128,
            training: TrainConfig::default(),
        }
    }
}

impl QuantileModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.lower && self.lower < self.upper && self.upper < 1.0) {
            return Err(Error::config(format!(
                "quantiles must satisfy 0 < lower < upper < 1, got {} and {}",
                self.lower, self.upper
            )));
        }
        Ok(())
    }
}

/// Order a (lower, upper) pair.
pub fn fix_crossing(lower: f64, upper: f64) -> (f64, f64) {
    if lower > upper {
        (upper, lower)
    } else {
        (lower, upper)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct QuantileTag {
    axis: Axis2,
    lower: f64,
    upper: f64,
}

/// One axis, two heads: channel 0 is the lower quantile, channel 1 the upper.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileModel {
    pub axis: Axis2,
    pub lower: f64,
    pub upper: f64,
    pub net: TrainedNet,
}

impl QuantileModel {
    pub fn train(
        axis: Axis2,
        train: &[SequenceSample],
        val: &[SequenceSample],
        config: &QuantileModelConfig,
        scaler: &Scaler,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if train.is_empty() || val.is_empty() {
            return Err(Error::contract("quantile model needs non-empty train and validation splits"));
        }
        let (mean, std) = scaler.position_stats();
        let c = axis.column();
        let feedback = Feedback {
            bootstrap_columns: vec![c, c],
            mean: vec![mean[c]; 2],
            std: vec![std[c]; 2],
        };
        let tr = seq_data(train, &[c, c])?;
        let va = seq_data(val, &[c, c])?;
        let net = NetConfig {
            input_dim: tr.inputs.dim().2,
            encoder_layers: config.encoder_layers,
            decoder_layers: config.decoder_layers,
            hidden_units: config.hidden_units,
            dense_units: config.dense_units,
            output_dim: 2,
        };
        let objective = Objective::Pinball {
            quantiles: vec![config.lower, config.upper],
        };
        let net = TrainedNet::train(net, feedback, &objective, &tr, &va, &config.training, scaler, seed)?;
        Ok(Self {
            axis,
            lower: config.lower,
            upper: config.upper,
            net,
        })
    }

    /// Raw head outputs, (B, L, 2), before the crossing fix.
    pub fn predict_raw(&self, windows: ArrayView3<f64>) -> Result<Array3<f64>> {
        self.net.predict(windows)
    }

    /// Ordered bounds, (B, L, 2).
    pub fn predict_bounds(&self, windows: ArrayView3<f64>) -> Result<Array3<f64>> {
        let mut out = self.predict_raw(windows)?;
        for mut pair in out.lanes_mut(Axis(2)) {
            let (l, u) = fix_crossing(pair[0], pair[1]);
            pair[0] = l;
            pair[1] = u;
        }
        Ok(out)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.net.save(
            dir,
            QuantileTag {
                axis: self.axis,
                lower: self.lower,
                upper: self.upper,
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (net, tag): (TrainedNet, QuantileTag) = TrainedNet::load(dir)?;
        Ok(Self {
            axis: tag.axis,
            lower: tag.lower,
            upper: tag.upper,
            net,
        })
    }
}

/// Lower and upper bounds, each L×2 with columns (y, x).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalTrajectory {
    pub lower: Array2<f64>,
    pub upper: Array2<f64>,
}

impl IntervalTrajectory {
    pub fn len(&self) -> usize {
        self.lower.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Interval widths at step `j` (0-based), (y, x).
    pub fn widths(&self, j: usize) -> [f64; 2] {
        [
            self.upper[[j, 0]] - self.lower[[j, 0]],
            self.upper[[j, 1]] - self.lower[[j, 1]],
        ]
    }
}

/// The pair of per-axis models.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalModels {
    pub lat: QuantileModel,
    pub lon: QuantileModel,
}

impl IntervalModels {
    pub fn new(lat: QuantileModel, lon: QuantileModel) -> Result<Self> {
        if lat.axis != Axis2::Lat || lon.axis != Axis2::Lon {
            return Err(Error::contract("interval models must be one lat and one lon model"));
        }
        if lat.net.horizon != lon.net.horizon {
            return Err(Error::contract("lat and lon models disagree on horizon"));
        }
        Ok(Self { lat, lon })
    }

    pub fn horizon(&self) -> usize {
        self.lat.net.horizon
    }

    pub fn predict_batch(&self, windows: ArrayView3<f64>) -> Result<Vec<IntervalTrajectory>> {
        let lat = self.lat.predict_bounds(windows)?;
        let lon = self.lon.predict_bounds(windows)?;
        let n = windows.dim().0;
        let l = self.horizon();
        Ok((0..n)
            .map(|i| {
                let mut lower = Array2::zeros((l, 2));
                let mut upper = Array2::zeros((l, 2));
                lower.column_mut(0).assign(&lat.slice(s![i, .., 0]));
                upper.column_mut(0).assign(&lat.slice(s![i, .., 1]));
                lower.column_mut(1).assign(&lon.slice(s![i, .., 0]));
                upper.column_mut(1).assign(&lon.slice(s![i, .., 1]));
                IntervalTrajectory { lower, upper }
            })
            .collect())
    }

    pub fn predict_intervals(&self, window: ArrayView2<f64>) -> Result<IntervalTrajectory> {
        Ok(self
            .predict_batch(window.insert_axis(Axis(0)))?
            .pop()
            .expect("one window in, one interval out"))
    }
}

/// Coverage counts and fractions of one axis at the reported steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisCoverage {
    pub below_upper: Vec<f64>,
    pub below_lower: Vec<f64>,
    pub between: Vec<f64>,
    pub below_upper_count: Vec<usize>,
    pub below_lower_count: Vec<usize>,
    pub between_count: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub steps: Vec<usize>,
    pub samples: usize,
    pub lat: AxisCoverage,
    pub lon: AxisCoverage,
}

/// Fractions of true positions with y ≤ upper, y ≤ lower and lower < y ≤ upper.
pub fn evaluate_coverage(intervals: &[IntervalTrajectory], truths: &[Array2<f64>], steps: &[usize]) -> Result<CoverageReport> {
    if intervals.len() != truths.len() {
        return Err(Error::contract("intervals and truths are not aligned"));
    }
    let n = intervals.len();
    let axis = |c: usize| -> Result<AxisCoverage> {
        let mut cov = AxisCoverage {
            below_upper: vec![],
            below_lower: vec![],
            between: vec![],
            below_upper_count: vec![0; steps.len()],
            below_lower_count: vec![0; steps.len()],
            between_count: vec![0; steps.len()],
        };
        for (iv, t) in intervals.iter().zip(truths) {
            if t.dim() != iv.lower.dim() || iv.upper.dim() != iv.lower.dim() {
                return Err(Error::contract("interval and truth shapes differ"));
            }
            for (k, &step) in steps.iter().enumerate() {
                if step == 0 || step > t.nrows() {
                    return Err(Error::contract(format!("step {step} outside horizon {}", t.nrows())));
                }
                let (y, lo, up) = (t[[step - 1, c]], iv.lower[[step - 1, c]], iv.upper[[step - 1, c]]);
                cov.below_upper_count[k] += (y <= up) as usize;
                cov.below_lower_count[k] += (y <= lo) as usize;
                cov.between_count[k] += (lo < y && y <= up) as usize;
            }
        }
        let frac = |v: &[usize]| v.iter().map(|&c| if n == 0 { 0.0 } else { c as f64 / n as f64 }).collect();
        cov.below_upper = frac(&cov.below_upper_count);
        cov.below_lower = frac(&cov.below_lower_count);
        cov.between = frac(&cov.between_count);
        Ok(cov)
    };
    Ok(CoverageReport {
        steps: steps.to_vec(),
        samples: n,
        lat: axis(0)?,
        lon: axis(1)?,
    })
}
