//! Gaussian kernel weights and bandwidth selection by cross-validation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PlzipError, Result};
use crate::fit::{em_fit, FitConfig, Predictor};
use crate::loss::{Count, LossSpec};
use crate::model::Dataset;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standardized distance beyond which Gaussian weights are dropped; the
/// relative weight there is below 1e-12.
pub const KERNEL_CUTOFF: f64 = 7.434;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    #[default]
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub kind: KernelKind,
    pub h: f64,
}

impl KernelConfig {
    pub fn gaussian(h: f64) -> Result<Self> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(PlzipError::Domain {
                what: "bandwidth",
                value: h,
            });
        }
        Ok(Self {
            kind: KernelKind::Gaussian,
            h,
        })
    }

    /// `K(d)` for a standardized distance `d`.
    #[inline]
    pub fn density(&self, d: f64) -> f64 {
        match self.kind {
            KernelKind::Gaussian => INV_SQRT_2PI * (-0.5 * d * d).exp(),
        }
    }

    /// Half-width of the window that carries all non-negligible weight.
    pub fn reach(&self) -> f64 {
        KERNEL_CUTOFF * self.h
    }
}

/// Nadaraya–Watson weights `K((τ − t_i)/h) / Σ_j K((τ − t_j)/h)`.
pub fn nw_weights(tau: f64, t: &[f64], cfg: &KernelConfig) -> Result<Vec<f64>> {
    if t.is_empty() {
        return Err(PlzipError::InsufficientData("empty smoothing variable".into()));
    }
    let raw: Vec<f64> = t.iter().map(|&ti| cfg.density((tau - ti) / cfg.h)).collect();
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) {
        return Err(PlzipError::DegenerateWindow { tau });
    }
    Ok(raw.into_iter().map(|k| k / total).collect())
}

/// `count` log-spaced bandwidths between `lo_frac` and `hi_frac` times the range of `t`.
pub fn bandwidth_grid(t: &[f64], lo_frac: f64, hi_frac: f64, count: usize) -> Vec<f64> {
    let (lo, hi) = t
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let range = (hi - lo).max(f64::MIN_POSITIVE);
    log_spaced(lo_frac * range, hi_frac * range, count)
}

/// Default candidate grid: 20 log-spaced values on `[0.02, 0.5]` times the range.
pub fn default_grid(t: &[f64]) -> Vec<f64> {
    bandwidth_grid(t, 0.02, 0.5, 20)
}

pub fn log_spaced(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count)
        .map(|k| (a + (b - a) * k as f64 / (count - 1) as f64).exp())
        .collect()
}

/// Cross-validation outcome: the selected bandwidth and the criterion per candidate
/// (`None` where some fold failed to converge).
#[derive(Debug, Clone, PartialEq)]
pub struct CvOutcome {
    pub h: f64,
    pub curve: Vec<(f64, Option<f64>)>,
}

/// Fold labels for `n` rows: a seeded shuffle cut into contiguous blocks.
pub fn fold_labels(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut labels = vec![0; n];
    for (rank, &i) in idx.iter().enumerate() {
        labels[i] = rank * folds / n;
    }
    labels
}

/// Held-out robust loss `Σ (1 − ŵ_i) ρ(y_i, x_iᵀβ̂ + m̂(t_i)) ω₁(x_i)` of a
/// fit on `train`, with `m̂` re-solved locally at every held-out `t_i`.
pub fn held_out_loss(predictor: &Predictor, test: &Dataset) -> Result<f64> {
    let spec = predictor.spec();
    let mut total = 0.0;
    for i in 0..test.len() {
        let x = test.x.row(i);
        let z = test.z.row(i);
        let m = predictor.predict_m(test.t[i])?;
        let (zg, log_mean) = predictor.predictors(x, z, m);
        let w = crate::model::posterior_w(test.y[i], zg, log_mean);
        let omega = predictor.omega1(x);
        total += (1.0 - w) * spec.value(&Count::new(test.y[i]), log_mean) * omega;
    }
    Ok(total)
}

/// Criterion for one bandwidth summed over folds; `None` if any fold fit fails
/// or does not converge.
pub fn cv_criterion(
    data: &Dataset,
    spec: &LossSpec,
    labels: &[usize],
    folds: usize,
    h: f64,
    cfg: &FitConfig,
) -> Option<f64> {
    let kernel = KernelConfig::gaussian(h).ok()?;
    let mut total = 0.0;
    for f in 0..folds {
        let train_idx: Vec<usize> = (0..data.len()).filter(|&i| labels[i] != f).collect();
        let test_idx: Vec<usize> = (0..data.len()).filter(|&i| labels[i] == f).collect();
        let train = data.subset(&train_idx);
        let test = data.subset(&test_idx);
        let fit = em_fit(&train, spec, &kernel, cfg).ok()?;
        if !fit.converged {
            return None;
        }
        let predictor = Predictor::new(&train, spec, &fit).ok()?;
        let loss = held_out_loss(&predictor, &test).ok()?;
        if !loss.is_finite() {
            return None;
        }
        total += loss;
    }
    Some(total / data.len() as f64)
}

/// k-fold cross-validated bandwidth. Ties go to the smaller bandwidth.
pub fn cv_bandwidth(
    data: &Dataset,
    spec: &LossSpec,
    folds: usize,
    grid: &[f64],
    seed: u64,
    cfg: &FitConfig,
) -> Result<CvOutcome> {
    if folds < 2 {
        return Err(PlzipError::Argument("at least two folds are required".into()));
    }
    if grid.is_empty() {
        return Err(PlzipError::Argument("empty bandwidth grid".into()));
    }
    if data.len() < 2 * folds {
        return Err(PlzipError::InsufficientData(format!(
            "{} rows cannot be split into {folds} folds",
            data.len()
        )));
    }
    if grid.len() == 1 {
        return Ok(CvOutcome {
            h: grid[0],
            curve: vec![(grid[0], None)],
        });
    }
    let labels = fold_labels(data.len(), folds, seed);
    let curve: Vec<(f64, Option<f64>)> = grid
        .iter()
        .map(|&h| (h, cv_criterion(data, spec, &labels, folds, h, cfg)))
        .collect();
    let mut best: Option<(f64, f64)> = None;
    for &(h, v) in &curve {
        if let Some(v) = v {
            let better = match best {
                None => true,
                Some((bh, bv)) => v < bv || (v == bv && h < bh),
            };
            if better {
                best = Some((h, v));
            }
        }
    }
    let (h, _) = best.ok_or(PlzipError::SelectionFailure)?;
    Ok(CvOutcome { h, curve })
}
