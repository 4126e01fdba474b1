use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Reported horizons in ticks (1, 2 and 3 s at 100 ms).
pub const REPORT_STEPS: [usize; 3] = [10, 20, 30];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    All,
    Turning,
    NonTurning,
}

impl Segment {
    pub const ALL: [Segment; 3] = [Segment::All, Segment::Turning, Segment::NonTurning];

    pub fn contains(self, turning: bool) -> bool {
        match self {
            Segment::All => true,
            Segment::Turning => turning,
            Segment::NonTurning => !turning,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Segment::All => "all",
            Segment::Turning => "turning",
            Segment::NonTurning => "non_turning",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentErrors {
    pub count: usize,
    /// Mean ED per reported step; `None` for an empty segment.
    pub mean: Vec<Option<f64>>,
    /// Every ED per reported step, for CDF plots.
    pub errors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub steps: Vec<usize>,
    pub segments: BTreeMap<Segment, SegmentErrors>,
}

impl ErrorReport {
    pub fn mean(&self, segment: Segment, step: usize) -> Option<f64> {
        let k = self.steps.iter().position(|&s| s == step)?;
        self.segments.get(&segment)?.mean[k]
    }
}

/// Euclidean error at every step of one prediction.
pub fn ed_per_step(pred: &Array2<f64>, truth: &Array2<f64>) -> Result<Vec<f64>> {
    if pred.dim() != truth.dim() || pred.ncols() != 2 {
        return Err(Error::contract(format!(
            "prediction {:?} and truth {:?} are not aligned L×2 matrices",
            pred.dim(),
            truth.dim()
        )));
    }
    Ok(pred
        .rows()
        .into_iter()
        .zip(truth.rows())
        .map(|(p, t)| ((p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2)).sqrt())
        .collect())
}

/// Mean ED at the given 1-based steps, split by turning status.
pub fn evaluate_ed(preds: &[Array2<f64>], truths: &[Array2<f64>], turning: &[bool], steps: &[usize]) -> Result<ErrorReport> {
    if preds.len() != truths.len() || preds.len() != turning.len() {
        return Err(Error::contract(format!(
            "{} predictions, {} truths, {} turning labels",
            preds.len(),
            truths.len(),
            turning.len()
        )));
    }
    let mut segments: BTreeMap<Segment, SegmentErrors> = Segment::ALL
        .iter()
        .map(|&s| {
            (
                s,
                SegmentErrors {
                    count: 0,
                    mean: vec![],
                    errors: vec![Vec::new(); steps.len()],
                },
            )
        })
        .collect();
    for ((p, t), &turn) in preds.iter().zip(truths).zip(turning) {
        let ed = ed_per_step(p, t)?;
        for seg in Segment::ALL.iter().filter(|s| s.contains(turn)) {
            let e = segments.get_mut(seg).expect("segment present");
            e.count += 1;
            for (k, &step) in steps.iter().enumerate() {
                if step == 0 || step > ed.len() {
                    return Err(Error::contract(format!("step {step} outside horizon {}", ed.len())));
                }
                e.errors[k].push(ed[step - 1]);
            }
        }
    }
    for e in segments.values_mut() {
        e.mean = e
            .errors
            .iter()
            .map(|v| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64))
            .collect();
    }
    Ok(ErrorReport {
        steps: steps.to_vec(),
        segments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(n: usize, dx: f64) -> Array2<f64> {
        Array2::from_shape_fn((n, 2), |(j, c)| if c == 1 { j as f64 + dx } else { 0.5 })
    }

    #[test]
    fn perfect_predictions_have_zero_error() {
        let p = vec![line(30, 0.0); 4];
        let r = evaluate_ed(&p, &p, &[true, false, false, true], &REPORT_STEPS).unwrap();
        for seg in Segment::ALL {
            for s in REPORT_STEPS {
                assert_eq!(r.mean(seg, s), Some(0.0));
            }
        }
        assert_eq!(r.segments[&Segment::Turning].count, 2);
    }

    #[test]
    fn unit_offset_gives_unit_error() {
        let p = vec![line(30, 1.0); 3];
        let t = vec![line(30, 0.0); 3];
        let r = evaluate_ed(&p, &t, &[false; 3], &REPORT_STEPS).unwrap();
        for s in REPORT_STEPS {
            assert!((r.mean(Segment::All, s).unwrap() - 1.0).abs() < 1e-12);
        }
        assert_eq!(r.mean(Segment::Turning, 10), None);
    }

    #[test]
    fn misaligned_inputs_are_rejected() {
        let p = vec![line(30, 0.0)];
        assert!(evaluate_ed(&p, &[], &[true], &REPORT_STEPS).is_err());
        assert!(evaluate_ed(&p, &[line(20, 0.0)], &[true], &REPORT_STEPS).is_err());
    }
}
