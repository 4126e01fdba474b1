//! Interval widths to diagonal Gaussian location uncertainty, and pairwise
//! distance statistics between predicted locations.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::uncertainty::IntervalTrajectory;

/// Which probability the chi-squared(2) quantile is taken at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KMode {
    /// p = u - l, the mass the interval is meant to hold.
    #[default]
    Coverage,
    /// p = 1 - (u - l).
    Literal,
}

/// Inverse CDF of chi-squared with two degrees of freedom.
pub fn chi2_2_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("probability {p} outside (0, 1)")));
    }
    Ok(-2.0 * (1.0 - p).ln())
}

pub fn k_epsilon(lower: f64, upper: f64, mode: KMode) -> Result<f64> {
    if !(0.0 < lower && lower < upper && upper < 1.0) {
        return Err(Error::Domain(format!("quantiles {lower}, {upper} must satisfy 0 < l < u < 1")));
    }
    let p = match mode {
        KMode::Coverage => upper - lower,
        KMode::Literal => 1.0 - (upper - lower),
    };
    chi2_2_quantile(p)
}

/// Diagonal variances from full interval widths: width² / K.
pub fn interval_to_covariance(widths: [f64; 2], k: f64) -> Result<[f64; 2]> {
    if !(k > 0.0) || !k.is_finite() {
        return Err(Error::Domain(format!("K must be positive, got {k}")));
    }
    if widths.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::contract(format!("interval widths {widths:?} must be non-negative")));
    }
    Ok(widths.map(|w| w * w / k))
}

/// Mean position (y, x) with independent per-axis variances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianLocation {
    pub mean: [f64; 2],
    pub var: [f64; 2],
}

impl GaussianLocation {
    pub fn trace(&self) -> f64 {
        self.var[0] + self.var[1]
    }
}

pub fn euclidean_distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// E‖Y_i − Y_k‖² for independent Gaussians.
pub fn expected_squared_distance(a: &GaussianLocation, b: &GaussianLocation) -> f64 {
    euclidean_distance(a.mean, b.mean).powi(2) + (a.trace() + b.trace())
}

/// Gaussian locations along a predicted trajectory.
pub fn trajectory_locations(points: &Array2<f64>, intervals: &IntervalTrajectory, k: f64) -> Result<Vec<GaussianLocation>> {
    if points.dim() != intervals.lower.dim() {
        return Err(Error::contract(format!(
            "point prediction {:?} and interval {:?} differ in shape",
            points.dim(),
            intervals.lower.dim()
        )));
    }
    (0..points.nrows())
        .map(|j| {
            Ok(GaussianLocation {
                mean: [points[[j, 0]], points[[j, 1]]],
                var: interval_to_covariance(intervals.widths(j), k)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn k_epsilon_modes() {
        assert!((k_epsilon(0.1, 0.9, KMode::Coverage).unwrap() - 3.2189).abs() < 1e-4);
        assert!((k_epsilon(0.1, 0.9, KMode::Literal).unwrap() - 0.4463).abs() < 1e-4);
        let tiny = chi2_2_quantile(1e-12).unwrap();
        assert!(tiny > 0.0 && tiny < 1e-11);
        assert!(matches!(chi2_2_quantile(1.0), Err(Error::Domain(_))));
        assert!(k_epsilon(0.9, 0.1, KMode::Coverage).is_err());
    }

    /// CDF by composite Simpson on the density, then bisection.
    fn numeric_chi2_2_inverse(p: f64) -> f64 {
        let pdf = |x: f64| 0.5 * (-x / 2.0).exp();
        let cdf = |x: f64| {
            let n = 2000;
            let h = x / n as f64;
            let mut s = pdf(0.0) + pdf(x);
            for i in 1..n {
                s += pdf(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            s * h / 3.0
        };
        let (mut lo, mut hi) = (0.0, 50.0);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn closed_form_matches_numeric_inversion() {
        for p in [0.05, 0.2, 0.5, 0.8, 0.95] {
            let a = chi2_2_quantile(p).unwrap();
            let b = numeric_chi2_2_inverse(p);
            assert!((a - b).abs() < 1e-6, "p={p}: {a} vs {b}");
        }
    }

    #[test]
    fn covariance_from_widths() {
        let k = 3.2189;
        assert!((interval_to_covariance([1.0, 0.0], k).unwrap()[0] - 0.3107).abs() < 1e-4);
        let v = interval_to_covariance([2.0, 3.0], k).unwrap();
        assert!((v[0] - 1.2427).abs() < 1e-3 && (v[1] - 2.7960).abs() < 1e-3);
        assert_eq!(interval_to_covariance([0.0, 0.0], k).unwrap(), [0.0, 0.0]);
        assert!(matches!(interval_to_covariance([-0.1, 1.0], k), Err(Error::Contract(_))));
    }

    #[test]
    fn distance_examples() {
        let z = GaussianLocation {
            mean: [0.0, 0.0],
            var: [0.0, 0.0],
        };
        let f = GaussianLocation {
            mean: [3.0, 4.0],
            var: [0.0, 0.0],
        };
        assert_eq!(expected_squared_distance(&z, &f), 25.0);
        assert_eq!(euclidean_distance(z.mean, f.mean), 5.0);
        assert_eq!(euclidean_distance(f.mean, f.mean), 0.0);
        let a = GaussianLocation {
            mean: [1.0, 1.0],
            var: [1.0, 1.0],
        };
        let b = GaussianLocation {
            mean: [1.0, 1.0],
            var: [2.0, 2.0],
        };
        assert_eq!(expected_squared_distance(&a, &b), 6.0);
    }

    /// Sample mean of ‖Y_a − Y_b‖² over independent draws.
    fn monte_carlo_sq_distance(a: &GaussianLocation, b: &GaussianLocation, n: usize, rng: &mut ChaCha8Rng) -> f64 {
        let axes: Vec<(Normal<f64>, Normal<f64>)> = (0..2)
            .map(|k| {
                (
                    Normal::new(a.mean[k], a.var[k].sqrt()).unwrap(),
                    Normal::new(b.mean[k], b.var[k].sqrt()).unwrap(),
                )
            })
            .collect();
        let mut sum = 0.0;
        for _ in 0..n {
            let mut d2 = 0.0;
            for (na, nb) in &axes {
                let d = na.sample(rng) - nb.sample(rng);
                d2 += d * d;
            }
            sum += d2;
        }
        sum / n as f64
    }

    #[test]
    fn matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..3 {
            let mut g = || GaussianLocation {
                mean: [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)],
                var: [rng.random_range(0.0..4.0), rng.random_range(0.0..4.0)],
            };
            let (a, b) = (g(), g());
            let exact = expected_squared_distance(&a, &b);
            let mc = monte_carlo_sq_distance(&a, &b, 200_000, &mut rng);
            assert!((mc - exact).abs() / exact < 0.01, "{mc} vs {exact}");
        }
    }

    fn gauss() -> impl Strategy<Value = GaussianLocation> {
        ((-50.0f64..50.0, -50.0f64..50.0), (0.0f64..9.0, 0.0f64..9.0)).prop_map(|(m, v)| GaussianLocation {
            mean: [m.0, m.1],
            var: [v.0, v.1],
        })
    }

    proptest! {
        #[test]
        fn expected_distance_bounds_and_symmetry(a in gauss(), b in gauss()) {
            let d2 = euclidean_distance(a.mean, b.mean).powi(2);
            let e = expected_squared_distance(&a, &b);
            prop_assert!(e >= d2 - 1e-9);
            prop_assert_eq!(e, expected_squared_distance(&b, &a));
            prop_assert_eq!(euclidean_distance(a.mean, b.mean), euclidean_distance(b.mean, a.mean));
            if a.trace() + b.trace() == 0.0 {
                prop_assert!((e - d2).abs() < 1e-9);
            } else {
                prop_assert!((e - d2 - (a.trace() + b.trace())).abs() <= 1e-9 * e.max(1.0));
            }
        }
    }
}
