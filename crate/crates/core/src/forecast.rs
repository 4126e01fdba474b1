//! Per-vehicle, per-tick forecasts over a whole trace: point trajectory,
//! prediction interval and the Gaussian locations derived from them.

use ndarray::{s, Array2, Array3};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::features::{encode_states, FeatureLayout, Scaler};
use crate::fusion::{trajectory_locations, GaussianLocation};
use crate::predictor::PointModel;
use crate::uncertainty::{IntervalModels, IntervalTrajectory};
use crate::world::trace::tick_index;
use crate::world::{annotate_preceding, Trace, VehicleId};

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleForecast {
    /// L×2 (y, x).
    pub point: Array2<f64>,
    pub interval: IntervalTrajectory,
    pub locations: Vec<GaussianLocation>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ForecastTable {
    pub horizon: usize,
    pub frames: BTreeMap<i64, BTreeMap<VehicleId, VehicleForecast>>,
}

impl ForecastTable {
    pub fn get(&self, tick: i64, id: VehicleId) -> Option<&VehicleForecast> {
        self.frames.get(&tick)?.get(&id)
    }

    pub fn len(&self) -> usize {
        self.frames.values().map(|f| f.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Everything needed to turn raw states into forecasts.
#[derive(Debug, Clone, Copy)]
pub struct Forecaster<'a> {
    pub point: &'a PointModel,
    pub intervals: &'a IntervalModels,
    pub scaler: &'a Scaler,
    pub input_ticks: usize,
    /// χ²(2) constant turning interval widths into variances.
    pub k_epsilon: f64,
}

impl Forecaster<'_> {
    fn check(&self, layout: &FeatureLayout) -> Result<()> {
        let d = layout.dim();
        let dims = [
            self.point.0.net.config.input_dim,
            self.intervals.lat.net.net.config.input_dim,
            self.intervals.lon.net.net.config.input_dim,
        ];
        if dims.iter().any(|&m| m != d) {
            return Err(Error::contract(format!(
                "trace layout encodes {d} features, models expect {dims:?}"
            )));
        }
        if self.point.horizon() != self.intervals.horizon() {
            return Err(Error::contract("point and interval models disagree on horizon"));
        }
        if self.input_ticks == 0 {
            return Err(Error::config("input_ticks must be positive"));
        }
        Ok(())
    }

    /// Forecast every vehicle at every tick where a full input window exists.
    pub fn forecast_trace(&self, trace: &Trace) -> Result<ForecastTable> {
        let layout = FeatureLayout::for_trace(trace);
        self.check(&layout)?;
        let annotated = annotate_preceding(trace.clone());
        let t = self.input_ticks;
        let mut table = ForecastTable {
            horizon: self.point.horizon(),
            frames: BTreeMap::new(),
        };
        for (id, states) in &annotated.vehicles {
            if states.len() < t {
                continue;
            }
            let enc = self.scaler.transform(&encode_states(states, &layout)?);
            let n = states.len() - t + 1;
            let mut windows = Array3::zeros((n, t, layout.dim()));
            for w in 0..n {
                windows.slice_mut(s![w, .., ..]).assign(&enc.slice(s![w..w + t, ..]));
            }
            let points = self.point.predict_batch(windows.view())?;
            let intervals = self.intervals.predict_batch(windows.view())?;
            for (w, interval) in intervals.into_iter().enumerate() {
                let point = points.slice(s![w, .., ..]).to_owned();
                let locations = trajectory_locations(&point, &interval, self.k_epsilon)?;
                let tick = tick_index(states[w + t - 1].time, trace.tick());
                table.frames.entry(tick).or_default().insert(
                    *id,
                    VehicleForecast {
                        point,
                        interval,
                        locations,
                    },
                );
            }
        }
        Ok(table)
    }
}
