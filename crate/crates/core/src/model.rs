//! The data model: samples, parameter estimates, likelihoods and the
//! posterior probability that a zero is structural.

use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_factorial;

use crate::error::{PlzipError, Result};
use crate::loss::LossFamily;
use crate::numeric::{log1p_exp, log_add_exp, logistic};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl RowMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix shape does not match data");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>], cols: usize) -> Self {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.data[i * self.cols + j]).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self::new(idx.len(), self.cols, data)
    }

    /// `row(i) · v`.
    #[inline]
    pub fn dot_row(&self, i: usize, v: &[f64]) -> f64 {
        dot(self.row(i), v)
    }

    /// Index of a column that is identically one, if any.
    pub fn intercept_column(&self) -> Option<usize> {
        (0..self.cols).find(|&j| self.rows > 0 && (0..self.rows).all(|i| self.data[i * self.cols + j] == 1.0))
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Observed sample: counts, Poisson-part covariates (no intercept), logistic
/// covariates and the smoothing variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub y: Vec<u64>,
    pub x: RowMatrix,
    pub z: RowMatrix,
    pub t: Vec<f64>,
}

impl Dataset {
    pub fn new(y: Vec<u64>, x: RowMatrix, z: RowMatrix, t: Vec<f64>) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(PlzipError::InvalidData("no observations".into()));
        }
        if x.rows() != n || z.rows() != n || t.len() != n {
            return Err(PlzipError::InvalidData(format!(
                "row counts differ: y {n}, x {}, z {}, t {}",
                x.rows(),
                z.rows(),
                t.len()
            )));
        }
        for (what, vals) in [("x", x.as_slice()), ("z", z.as_slice()), ("t", &t[..])] {
            if let Some(k) = vals.iter().position(|v| !v.is_finite()) {
                let row = if what == "t" {
                    k
                } else if what == "x" {
                    k / x.cols().max(1)
                } else {
                    k / z.cols().max(1)
                };
                return Err(PlzipError::InvalidData(format!(
                    "non-finite value in {what} at row {row}"
                )));
            }
        }
        Ok(Self { y, x, z, t })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn p(&self) -> usize {
        self.x.cols()
    }

    pub fn q(&self) -> usize {
        self.z.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            y: idx.iter().map(|&i| self.y[i]).collect(),
            x: self.x.select_rows(idx),
            z: self.z.select_rows(idx),
            t: idx.iter().map(|&i| self.t[i]).collect(),
        }
    }

    /// Fraction of zero responses.
    pub fn zero_fraction(&self) -> f64 {
        self.y.iter().filter(|&&y| y == 0).count() as f64 / self.len() as f64
    }
}

/// Fitted parameters. `m_values` is aligned with the training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaEstimate {
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub m_values: Vec<(f64, f64)>,
    pub h: f64,
    pub loss: LossFamily,
    pub c: Option<f64>,
}

impl ThetaEstimate {
    pub fn m(&self) -> Vec<f64> {
        self.m_values.iter().map(|&(_, m)| m).collect()
    }

    fn check(&self, data: &Dataset) {
        assert_eq!(self.m_values.len(), data.len(), "estimate does not cover the sample");
        assert_eq!(self.beta.len(), data.p());
        assert_eq!(self.gamma.len(), data.q());
    }

    /// `(z_iᵀγ, x_iᵀβ + m(t_i))`.
    pub fn predictors(&self, data: &Dataset, i: usize) -> (f64, f64) {
        (
            data.z.dot_row(i, &self.gamma),
            data.x.dot_row(i, &self.beta) + self.m_values[i].1,
        )
    }
}

/// `E(w | y)`: zero for positive counts, `1 / (1 + exp(−zγ − e^{xβ+m}))` for zeros.
#[inline]
pub fn posterior_w(y: u64, z_gamma: f64, log_mean: f64) -> f64 {
    if y > 0 {
        0.0
    } else {
        logistic(z_gamma + log_mean.exp())
    }
}

/// `(1 − π) λ` with `π = logistic(zγ)` and `λ = e^{xβ+m}`.
pub fn zip_mean(z_gamma: f64, log_mean: f64) -> f64 {
    (1.0 - logistic(z_gamma)) * log_mean.exp()
}

/// Observed-data log-likelihood.
pub fn loglik(data: &Dataset, theta: &ThetaEstimate) -> f64 {
    theta.check(data);
    (0..data.len())
        .map(|i| {
            let (zg, eta) = theta.predictors(data, i);
            let norm = log1p_exp(zg);
            if data.y[i] == 0 {
                log_add_exp(zg, -eta.exp()) - norm
            } else {
                let y = data.y[i];
                y as f64 * eta - eta.exp() - ln_factorial(y) - norm
            }
        })
        .sum()
}

/// Poisson and logistic parts of the complete-data log-likelihood.
pub fn complete_loglik_parts(data: &Dataset, w: &[f64], theta: &ThetaEstimate) -> (f64, f64) {
    theta.check(data);
    assert_eq!(w.len(), data.len());
    let mut poisson = 0.0;
    let mut logistic_part = 0.0;
    for i in 0..data.len() {
        let (zg, eta) = theta.predictors(data, i);
        let y = data.y[i];
        if w[i] < 1.0 {
            poisson += (1.0 - w[i]) * (y as f64 * eta - eta.exp() - ln_factorial(y));
        }
        logistic_part += w[i] * zg - log1p_exp(zg);
    }
    (poisson, logistic_part)
}

pub fn complete_loglik(data: &Dataset, w: &[f64], theta: &ThetaEstimate) -> f64 {
    let (a, b) = complete_loglik_parts(data, w, theta);
    a + b
}

/// Gradient of the complete-data log-likelihood in `(β, γ)`.
pub fn complete_score(data: &Dataset, w: &[f64], theta: &ThetaEstimate) -> (Vec<f64>, Vec<f64>) {
    theta.check(data);
    let mut gb = vec![0.0; data.p()];
    let mut gg = vec![0.0; data.q()];
    for i in 0..data.len() {
        let (zg, eta) = theta.predictors(data, i);
        let rb = (1.0 - w[i]) * (data.y[i] as f64 - eta.exp());
        for (g, x) in gb.iter_mut().zip(data.x.row(i)) {
            *g += rb * x;
        }
        let rg = w[i] - logistic(zg);
        for (g, z) in gg.iter_mut().zip(data.z.row(i)) {
            *g += rg * z;
        }
    }
    (gb, gg)
}
