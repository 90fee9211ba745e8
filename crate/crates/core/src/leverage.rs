//! Leverage weights from a robust, coordinatewise Mahalanobis distance.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::model::RowMatrix;
use crate::numeric::{mad, median};

/// Consistency factor turning a raw MAD into a normal-scale estimate.
pub const MAD_SCALE: f64 = 1.4826;
/// Quantile of the χ² law used as the cutoff.
pub const CUTOFF_LEVEL: f64 = 0.975;

/// How weights behave past the cutoff.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Decay {
    /// `cutoff / MD²`.
    #[default]
    Smooth,
    /// Zero weight.
    Hard,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeverageWeights {
    /// Median of every column, degenerate ones included.
    pub center: Vec<f64>,
    /// Scaled MAD of every column; zero marks a column left out of the distance.
    pub scale: Vec<f64>,
    pub cutoff: f64,
    pub decay: Decay,
}

impl LeverageWeights {
    /// Weights that are identically one.
    pub fn unit(dim: usize) -> Self {
        Self {
            center: vec![0.0; dim],
            scale: vec![0.0; dim],
            cutoff: f64::INFINITY,
            decay: Decay::Smooth,
        }
    }

    /// Number of columns that enter the distance.
    pub fn retained(&self) -> usize {
        self.scale.iter().filter(|&&s| s > 0.0).count()
    }

    /// Squared robust distance of `v` from the center.
    pub fn distance2(&self, v: &[f64]) -> f64 {
        v.iter()
            .zip(&self.center)
            .zip(&self.scale)
            .filter(|(_, &s)| s > 0.0)
            .map(|((x, c), s)| {
                let r = (x - c) / s;
                r * r
            })
            .sum()
    }

    pub fn omega(&self, v: &[f64]) -> f64 {
        if self.retained() == 0 {
            return 1.0;
        }
        let d2 = self.distance2(v);
        if d2 <= self.cutoff {
            1.0
        } else {
            match self.decay {
                Decay::Smooth => self.cutoff / d2,
                Decay::Hard => 0.0,
            }
        }
    }

    /// ω for every row of `m`.
    pub fn omega_rows(&self, m: &RowMatrix) -> Vec<f64> {
        (0..m.rows()).map(|i| self.omega(m.row(i))).collect()
    }
}

/// Median/MAD standardization of each column with a χ² cutoff at the number
/// of non-degenerate columns. Requires at least two rows.
pub fn build_leverage(m: &RowMatrix, decay: Decay) -> LeverageWeights {
    assert!(m.rows() >= 2, "leverage weights need at least two rows");
    let mut center = Vec::with_capacity(m.cols());
    let mut scale = Vec::with_capacity(m.cols());
    for j in 0..m.cols() {
        let col = m.column(j);
        center.push(median(&col));
        scale.push(MAD_SCALE * mad(&col));
    }
    let d = scale.iter().filter(|&&s| s > 0.0).count();
    let cutoff = if d == 0 {
        f64::INFINITY
    } else {
        ChiSquared::new(d as f64)
            .expect("positive degrees of freedom")
            .inverse_cdf(CUTOFF_LEVEL)
    };
    LeverageWeights {
        center,
        scale,
        cutoff,
        decay,
    }
}
