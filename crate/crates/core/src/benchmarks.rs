//! Comparison detectors: a predicted-distance threshold and a kinematic
//! time-to-collision check solved as a quartic.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::detection::{pair_distances, run_pairwise, DetectionConfig, DetectionLog, Method, SporadicityConfig, Verdict};
use crate::error::{Error, Result};
use crate::forecast::ForecastTable;
use crate::geometry::Vec2;
use crate::world::{Trace, VehicleState};

pub const ROOT_RESIDUAL: f64 = 1e-6;

/// Alarm when the closest predicted approach falls under `threshold`.
pub fn relative_distance_verdict(min_predicted_distance: f64, threshold: f64) -> bool {
    min_predicted_distance < threshold
}

/// Evaluate a polynomial given highest-degree-first coefficients.
pub fn poly_eval(coeffs: &[f64], t: f64) -> f64 {
    coeffs.iter().fold(0.0, |acc, c| acc * t + c)
}

fn poly_derivative(coeffs: &[f64]) -> Vec<f64> {
    let n = coeffs.len() - 1;
    coeffs[..n].iter().enumerate().map(|(i, c)| c * (n - i) as f64).collect()
}

fn bisect(c: &[f64], mut lo: f64, mut hi: f64) -> f64 {
    let mut f_lo = poly_eval(c, lo);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let f_mid = poly_eval(c, mid);
        if f_mid == 0.0 {
            return mid;
        }
        if (f_mid > 0.0) == (f_lo > 0.0) {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

// Roots in [lo, hi]: the polynomial is monotone between consecutive roots of
// its derivative, so each such piece holds at most one sign change.
fn roots_between(c: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    if c.len() == 2 {
        let t = -c[1] / c[0];
        return if (lo..=hi).contains(&t) { vec![t] } else { Vec::new() };
    }
    let critical = roots_between(&poly_derivative(c), lo, hi);
    let mut knots = Vec::with_capacity(critical.len() + 2);
    knots.push(lo);
    knots.extend(critical.iter().copied());
    knots.push(hi);
    let mut roots = Vec::new();
    for w in knots.windows(2) {
        let (fa, fb) = (poly_eval(c, w[0]), poly_eval(c, w[1]));
        if fa.abs() < ROOT_RESIDUAL {
            roots.push(w[0]);
        } else if fb.abs() >= ROOT_RESIDUAL && (fa > 0.0) != (fb > 0.0) {
            roots.push(bisect(c, w[0], w[1]));
        }
    }
    if poly_eval(c, hi).abs() < ROOT_RESIDUAL {
        roots.push(hi);
    }
    roots
}

/// Real roots of a polynomial (highest degree first), kept only if |p(t)| < `ROOT_RESIDUAL`.
/// Each root is bracketed between critical points inside the Cauchy bound and bisected.
pub fn real_roots(coeffs: &[f64]) -> Vec<f64> {
    let scale = coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if scale == 0.0 {
        return Vec::new();
    }
    let start = coeffs.iter().position(|c| c.abs() > 1e-14 * scale).unwrap_or(coeffs.len());
    let c = &coeffs[start..];
    if c.len() < 2 {
        return Vec::new();
    }
    let bound = 1.0 + c[1..].iter().fold(0.0f64, |m, x| m.max((x / c[0]).abs()));
    let mut roots: Vec<f64> = roots_between(c, -bound, bound)
        .into_iter()
        .filter(|&t| t.is_finite() && poly_eval(c, t).abs() < ROOT_RESIDUAL)
        .collect();
    roots.sort_by(f64::total_cmp);
    roots.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
    roots
}

/// Coefficients of |p + v·t + ½·a·t²|² − r² in t, highest degree first.
pub fn separation_quartic(p: Vector2<f64>, v: Vector2<f64>, a: Vector2<f64>, radius: f64) -> [f64; 5] {
    let h = a * 0.5;
    [
        h.dot(&h),
        2.0 * h.dot(&v),
        v.dot(&v) + 2.0 * h.dot(&p),
        2.0 * v.dot(&p),
        p.dot(&p) - radius * radius,
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuarticSolveResult {
    /// Real non-negative roots in seconds, ascending.
    pub roots: Vec<f64>,
    /// Earliest time within the horizon at which the separation reaches the radius.
    pub earliest: Option<f64>,
}

/// Relative kinematics of the pair; `None` in `earliest` means no predicted contact.
/// A pair already inside the radius reports contact at t = 0.
pub fn ci_cws_solve(p: Vector2<f64>, v: Vector2<f64>, a: Vector2<f64>, radius: f64, horizon: f64) -> QuarticSolveResult {
    let q = separation_quartic(p, v, a, radius);
    let roots: Vec<f64> = real_roots(&q).into_iter().filter(|&t| t >= 0.0).collect();
    let earliest = if q[4] <= 0.0 {
        Some(0.0)
    } else {
        roots.iter().copied().find(|&t| t > 0.0 && t <= horizon)
    };
    QuarticSolveResult { roots, earliest }
}

pub fn ci_cws_detect(p: Vector2<f64>, v: Vector2<f64>, a: Vector2<f64>, radius: f64, horizon: f64) -> Option<f64> {
    ci_cws_solve(p, v, a, radius, horizon).earliest
}

/// Position, velocity and (longitudinal) acceleration vectors of a state.
pub fn kinematics(s: &VehicleState) -> (Vector2<f64>, Vector2<f64>, Vector2<f64>) {
    let dir = Vec2::from_heading(s.heading);
    let d = Vector2::new(dir.x, dir.y);
    (
        Vector2::new(s.position.x, s.position.y),
        d * s.speed,
        d * s.acceleration,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CiCwsConfig {
    pub radius: f64,
    pub horizon: f64,
}

impl Default for CiCwsConfig {
    fn default() -> Self {
        Self {
            radius: 4.0,
            horizon: 3.0,
        }
    }
}

fn unfiltered(cfg: &DetectionConfig) -> DetectionConfig {
    DetectionConfig {
        sporadicity: SporadicityConfig {
            k: 1,
            ..cfg.sporadicity
        },
        ..*cfg
    }
}

/// Predicted-distance baseline, alarming on the first positive tick.
pub fn run_relative_distance(trace: &Trace, forecasts: &ForecastTable, threshold: f64, cfg: &DetectionConfig) -> Result<DetectionLog> {
    run_pairwise(trace, forecasts, Method::RelativeDistance, &unfiltered(cfg), |ctx| {
        let d = pair_distances(ctx)?;
        let positive = relative_distance_verdict(d.min_distance, threshold);
        Ok(Verdict {
            positive,
            score: positive as u8 as f64,
            min_distance: d.min_distance,
            min_expected_sq: d.min_expected_sq,
        })
    })
}

/// Kinematic quartic baseline on current states, alarming on the first positive tick.
pub fn run_ci_cws(trace: &Trace, forecasts: &ForecastTable, ci: &CiCwsConfig, cfg: &DetectionConfig) -> Result<DetectionLog> {
    run_pairwise(trace, forecasts, Method::CiCws, &unfiltered(cfg), |ctx| {
        let (Some(a), Some(b)) = (
            ctx.trace.state_at(ctx.pair.0, ctx.tick),
            ctx.trace.state_at(ctx.pair.1, ctx.tick),
        ) else {
            return Err(Error::contract(format!("pair {:?} lacks states at tick {}", ctx.pair, ctx.tick)));
        };
        let (pa, va, aa) = kinematics(a);
        let (pb, vb, ab) = kinematics(b);
        let hit = ci_cws_detect(pb - pa, vb - va, ab - aa, ci.radius, ci.horizon);
        let d = (pb - pa).norm();
        Ok(Verdict {
            positive: hit.is_some(),
            score: hit.is_some() as u8 as f64,
            min_distance: d,
            min_expected_sq: d * d,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(x: f64, y: f64) -> Vector2<f64> {
        Vector2::new(x, y)
    }

    #[test]
    fn relative_distance_examples() {
        assert!(relative_distance_verdict(4.0, 4.87));
        assert!(!relative_distance_verdict(4.87, 4.87));
        assert!(relative_distance_verdict(0.0, 4.87));
    }

    #[test]
    fn head_on_closing() {
        let t = ci_cws_detect(v(100.0, 0.0), v(-20.0, 0.0), v(0.0, 0.0), 0.0, 10.0).unwrap();
        assert!((t - 5.0).abs() < 1e-6, "{t}");
    }

    #[test]
    fn parallel_never_meets() {
        assert_eq!(ci_cws_detect(v(0.0, 6.0), v(0.0, 0.0), v(0.0, 0.0), 4.0, 10.0), None);
    }

    #[test]
    fn double_root_outside_horizon() {
        let (p, vr, a) = (v(100.0, 0.0), v(-20.0, 0.0), v(2.0, 0.0));
        assert_eq!(ci_cws_detect(p, vr, a, 0.0, 3.0), None);
        let t = ci_cws_detect(p, vr, a, 0.0, 20.0).unwrap();
        assert!((t - 10.0).abs() < 1e-3, "{t}");
    }

    #[test]
    fn already_inside_radius_is_immediate() {
        assert_eq!(ci_cws_detect(v(1.0, 1.0), v(0.0, 0.0), v(0.0, 0.0), 4.0, 3.0), Some(0.0));
    }

    fn separation_sq(p: Vector2<f64>, vr: Vector2<f64>, a: Vector2<f64>, t: f64) -> f64 {
        (p + vr * t + a * (0.5 * t * t)).norm_squared()
    }

    fn kin() -> impl Strategy<Value = (Vector2<f64>, Vector2<f64>, Vector2<f64>)> {
        (
            (-60.0f64..60.0, -60.0f64..60.0),
            (-25.0f64..25.0, -25.0f64..25.0),
            (-5.0f64..5.0, -5.0f64..5.0),
        )
            .prop_map(|(p, w, a)| (v(p.0, p.1), v(w.0, w.1), v(a.0, a.1)))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn roots_are_geometric_contacts((p, vr, a) in kin(), r in 0.0f64..6.0) {
            let res = ci_cws_solve(p, vr, a, r, 10.0);
            for &t in &res.roots {
                let g = separation_sq(p, vr, a, t) - r * r;
                prop_assert!(g.abs() < ROOT_RESIDUAL, "t={t} residual {g}");
            }
            let swapped = ci_cws_solve(-p, -vr, -a, r, 10.0);
            prop_assert_eq!(res.earliest, swapped.earliest);
        }

        #[test]
        fn no_sign_change_is_missed((p, vr, a) in kin(), r in 0.5f64..6.0) {
            let h = 3.0;
            let res = ci_cws_solve(p, vr, a, r, h);
            let f = |t: f64| separation_sq(p, vr, a, t) - r * r;
            let step = 1e-3;
            let mut t = 0.0;
            let mut first = None;
            while t + step <= h {
                if f(t) > 0.0 && f(t + step) <= 0.0 {
                    first = Some(t);
                    break;
                }
                t += step;
            }
            if let (Some(t0), true) = (first, f(0.0) > 0.0) {
                let e = res.earliest;
                prop_assert!(e.is_some_and(|e| e <= t0 + step + 1e-9), "sampled crossing near {t0}, solver {e:?}");
            }
        }
    }
}
