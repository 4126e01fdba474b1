use ndarray::{Array3, ArrayView3, Zip};
use serde::{Deserialize, Serialize};

/// Quantile (pinball) loss of residual `z = y - ŷ`. At `z = 0` the `z ≥ 0` branch is used.
pub fn pinball(z: f64, q: f64) -> f64 {
    if z >= 0.0 {
        q * z
    } else {
        (q - 1.0) * z
    }
}

fn pinball_slope(z: f64, q: f64) -> f64 {
    if z >= 0.0 {
        q
    } else {
        q - 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Objective {
    /// Squared error summed over output channels, averaged over samples and steps.
    Mse,
    /// Pinball loss with one quantile per output channel, averaged over channels,
    /// samples and steps.
    Pinball { quantiles: Vec<f64> },
}

impl Objective {
    fn scale(&self, pred: &ArrayView3<f64>) -> f64 {
        let (n, l, c) = pred.dim();
        match self {
            Objective::Mse => 1.0 / (n * l) as f64,
            Objective::Pinball { .. } => 1.0 / (n * l * c) as f64,
        }
    }

    pub fn loss(&self, pred: ArrayView3<f64>, target: ArrayView3<f64>) -> f64 {
        let k = self.scale(&pred);
        let mut total = 0.0;
        match self {
            Objective::Mse => Zip::from(&pred).and(&target).for_each(|p, y| total += (y - p).powi(2)),
            Objective::Pinball { quantiles } => Zip::indexed(&pred).and(&target).for_each(|(_, _, c), p, y| {
                total += pinball(y - p, quantiles[c]);
            }),
        }
        total * k
    }

    /// Loss and its gradient w.r.t. the predictions.
    pub fn loss_and_grad(&self, pred: ArrayView3<f64>, target: ArrayView3<f64>) -> (f64, Array3<f64>) {
        let k = self.scale(&pred);
        let mut grad = Array3::zeros(pred.raw_dim());
        let mut total = 0.0;
        match self {
            Objective::Mse => Zip::from(&mut grad).and(&pred).and(&target).for_each(|g, p, y| {
                let r = y - p;
                total += r * r;
                *g = -2.0 * r * k;
            }),
            Objective::Pinball { quantiles } => {
                Zip::indexed(&mut grad).and(&pred).and(&target).for_each(|(_, _, c), g, p, y| {
                    let z = y - p;
                    total += pinball(z, quantiles[c]);
                    *g = -pinball_slope(z, quantiles[c]) * k;
                })
            }
        }
        (total * k, grad)
    }
}
