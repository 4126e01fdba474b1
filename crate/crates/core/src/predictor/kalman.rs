use nalgebra::{Matrix2, RowVector2, Vector2};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureLayout, Scaler};

/// Noise intensities of the constant-velocity filter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KalmanConfig {
    pub process_noise: f64,
    pub measurement_noise: f64,
}

impl Default for KalmanConfig {
    fn default() -> Self {
        Self {
            process_noise: 0.1,
            measurement_noise: 0.1,
        }
    }
}

/// Filter one axis; returns the final (position, velocity).
fn filter_axis(z: &[f64], tick: f64, cfg: &KalmanConfig) -> (f64, f64) {
    let r = cfg.measurement_noise;
    let q = cfg.process_noise;
    let f = Matrix2::new(1.0, tick, 0.0, 1.0);
    let (t2, t3, t4) = (tick * tick, tick.powi(3), tick.powi(4));
    let qm = Matrix2::new(t4 / 4.0, t3 / 2.0, t3 / 2.0, t2) * q;
    let h = RowVector2::new(1.0, 0.0);

    // two-point initialisation
    let mut x = Vector2::new(z[1], (z[1] - z[0]) / tick);
    let mut p = Matrix2::new(r, r / tick, r / tick, 2.0 * r / t2);
    for &obs in &z[2..] {
        x = f * x;
        p = f * p * f.transpose() + qm;
        let s = (h * p * h.transpose())[(0, 0)] + r;
        if s > 0.0 {
            let k = p * h.transpose() / s;
            x += k * (obs - x[0]);
            p = (Matrix2::identity() - k * h) * p;
        }
    }
    (x[0], x[1])
}

/// Constant-velocity Kalman filter over (y, x) positions, then open-loop
/// extrapolation for `horizon` ticks. Output rows are (y, x).
pub fn kf_predict(positions: &[[f64; 2]], tick: f64, horizon: usize, cfg: &KalmanConfig) -> Result<Array2<f64>> {
    if positions.len() < 2 {
        return Err(Error::contract("the Kalman baseline needs at least two positions"));
    }
    if !(tick > 0.0) {
        return Err(Error::contract("tick must be positive"));
    }
    let mut out = Array2::zeros((horizon, 2));
    for axis in 0..2 {
        let z: Vec<f64> = positions.iter().map(|p| p[axis]).collect();
        let (p, v) = filter_axis(&z, tick, cfg);
        for j in 0..horizon {
            out[[j, axis]] = p + v * tick * (j + 1) as f64;
        }
    }
    Ok(out)
}

/// Same as [`kf_predict`] on a standardized feature window.
pub fn kf_predict_window(
    window: ArrayView2<f64>,
    scaler: &Scaler,
    tick: f64,
    horizon: usize,
    cfg: &KalmanConfig,
) -> Result<Array2<f64>> {
    let (mean, std) = scaler.position_stats();
    let [cy, cx] = FeatureLayout::POSITION;
    let pos: Vec<[f64; 2]> = window
        .rows()
        .into_iter()
        .map(|r| [r[cy] * std[0] + mean[0], r[cx] * std[1] + mean[1]])
        .collect();
    kf_predict(&pos, tick, horizon, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stationary_vehicle_stays_put() {
        let pos = vec![[5.0, -3.0]; 30];
        let p = kf_predict(&pos, 0.1, 30, &KalmanConfig::default()).unwrap();
        for row in p.rows() {
            assert!((row[0] - 5.0).abs() < 1e-6 && (row[1] + 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn converges_on_constant_velocity() {
        let pos: Vec<[f64; 2]> = (0..30).map(|i| [2.0, i as f64]).collect();
        let p = kf_predict(&pos, 0.1, 30, &KalmanConfig::default()).unwrap();
        for j in 0..30 {
            assert!((p[[j, 1]] - (29.0 + (j + 1) as f64)).abs() < 0.05);
            assert!((p[[j, 0]] - 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn noiseless_filter_is_exact_extrapolation() {
        let cfg = KalmanConfig {
            process_noise: 0.0,
            measurement_noise: 0.0,
        };
        let pos: Vec<[f64; 2]> = (0..12).map(|i| [1.0 - 0.7 * i as f64, 3.0 + 1.3 * i as f64]).collect();
        let p = kf_predict(&pos, 0.1, 5, &cfg).unwrap();
        for j in 0..5 {
            let i = (11 + j + 1) as f64;
            assert!((p[[j, 0]] - (1.0 - 0.7 * i)).abs() < 1e-12);
            assert!((p[[j, 1]] - (3.0 + 1.3 * i)).abs() < 1e-12);
        }
    }

    #[test]
    fn arc_error_grows_with_horizon() {
        let (r, w) = (15.0, 0.6);
        let arc = |t: f64| [r * (w * t).sin(), r * (1.0 - (w * t).cos())];
        let pos: Vec<[f64; 2]> = (0..30).map(|i| arc(i as f64 * 0.1)).collect();
        let p = kf_predict(&pos, 0.1, 30, &KalmanConfig::default()).unwrap();
        let ed: Vec<f64> = (0..30)
            .map(|j| {
                let t = arc((29 + j + 1) as f64 * 0.1);
                ((p[[j, 0]] - t[0]).powi(2) + (p[[j, 1]] - t[1]).powi(2)).sqrt()
            })
            .collect();
        for w in ed.windows(2) {
            assert!(w[1] > w[0], "{ed:?}");
        }
    }

    #[test]
    fn needs_two_samples() {
        assert!(kf_predict(&[[0.0, 0.0]], 0.1, 3, &KalmanConfig::default()).is_err());
    }
}
