use ndarray::{Array2, ArrayViewMut2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{FeatureLayout, SequenceSample};
use crate::error::{Error, Result};

/// Per-column standardization fitted on training inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub columns: Vec<usize>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    /// Mean and population std over every input row of every sample. A column
    /// with zero spread gets std 1.
    pub fn fit(samples: &[SequenceSample], layout: &FeatureLayout) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::contract("cannot fit a scaler on an empty training set"));
        }
        let columns = layout.continuous_columns();
        let mut sum = vec![0.0; columns.len()];
        let mut count = 0usize;
        for s in samples {
            for row in s.input.rows() {
                for (k, &c) in columns.iter().enumerate() {
                    sum[k] += row[c];
                }
                count += 1;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|v| v / count as f64).collect();
        let mut var = vec![0.0; columns.len()];
        for s in samples {
            for row in s.input.rows() {
                for (k, &c) in columns.iter().enumerate() {
                    let d = row[c] - mean[k];
                    var[k] += d * d;
                }
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let sd = (v / count as f64).sqrt();
                if sd > 1e-12 && sd.is_finite() {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { columns, mean, std })
    }

    pub fn transform_inplace(&self, mut m: ArrayViewMut2<f64>) {
        for mut row in m.rows_mut() {
            for (k, &c) in self.columns.iter().enumerate() {
                row[c] = (row[c] - self.mean[k]) / self.std[k];
            }
        }
    }

    pub fn inverse_inplace(&self, mut m: ArrayViewMut2<f64>) {
        for mut row in m.rows_mut() {
            for (k, &c) in self.columns.iter().enumerate() {
                row[c] = row[c] * self.std[k] + self.mean[k];
            }
        }
    }

    pub fn transform(&self, m: &Array2<f64>) -> Array2<f64> {
        let mut out = m.clone();
        self.transform_inplace(out.view_mut());
        out
    }

    pub fn apply(&self, samples: &mut [SequenceSample]) {
        for s in samples {
            self.transform_inplace(s.input.view_mut());
        }
    }

    fn slot(&self, column: usize) -> usize {
        self.columns
            .iter()
            .position(|&c| c == column)
            .expect("position columns are continuous")
    }

    /// Mean and std of the (y, x) position columns.
    pub fn position_stats(&self) -> ([f64; 2], [f64; 2]) {
        let [a, b] = FeatureLayout::POSITION.map(|c| self.slot(c));
        ([self.mean[a], self.mean[b]], [self.std[a], self.std[b]])
    }

    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("scaler serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

/// Fit on `train`, then scale `train` and every other split with the same parameters.
pub fn fit_and_apply_scaler(
    mut train: Vec<SequenceSample>,
    others: Vec<Vec<SequenceSample>>,
    layout: &FeatureLayout,
) -> Result<(Scaler, Vec<SequenceSample>, Vec<Vec<SequenceSample>>)> {
    let scaler = Scaler::fit(&train, layout)?;
    scaler.apply(&mut train);
    let others = others
        .into_iter()
        .map(|mut v| {
            scaler.apply(&mut v);
            v
        })
        .collect();
    Ok((scaler, train, others))
}
