//! Simulation schemes, error metrics and the replication study driver.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PlzipError, Result};
use crate::fit::{em_fit, FitConfig, FitContext, Predictor};
use crate::loss::{LossFamily, LossSpec};
use crate::model::{dot, Dataset, RowMatrix};
use crate::numeric::{logistic, mad, median};
use crate::smoothing::{cv_bandwidth, fold_labels, KernelConfig};

pub const TRUE_BETA: [f64; 2] = [2.0, 2.0];
pub const TRUE_GAMMA: [f64; 2] = [-1.0, 1.0];
/// Value added to contaminated responses.
pub const OUTLIER_SHIFT: u64 = 70;

pub fn true_m(t: f64) -> f64 {
    (std::f64::consts::FRAC_PI_2 * t).sin()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    C0,
    C1,
    C2,
    C3,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::C0, Scheme::C1, Scheme::C2, Scheme::C3];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::C0 => "c0",
            Scheme::C1 => "c1",
            Scheme::C2 => "c2",
            Scheme::C3 => "c3",
        }
    }

    /// Sizes of the response-outlier and false-zero subsets.
    pub fn contamination_sizes(self, n: usize) -> (usize, usize) {
        let tenth = n / 10;
        let twentieth = n / 20;
        match self {
            Scheme::C0 => (0, 0),
            Scheme::C1 => (tenth, 0),
            Scheme::C2 => (0, tenth),
            Scheme::C3 => (twentieth, twentieth),
        }
    }
}

impl FromStr for Scheme {
    type Err = PlzipError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "c0" => Ok(Scheme::C0),
            "c1" => Ok(Scheme::C1),
            "c2" => Ok(Scheme::C2),
            "c3" => Ok(Scheme::C3),
            other => Err(PlzipError::Argument(format!("unknown scheme '{other}'"))),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeConfig {
    pub scheme: Scheme,
    pub n: usize,
    pub seed: u64,
    /// RNG stream; the study uses the replication index, so every scheme
    /// shares the uncontaminated draws of a replication.
    pub stream: u64,
    /// Prepend a column of ones to `Z` (and a zero to the true γ).
    pub z_intercept: bool,
}

impl SchemeConfig {
    pub fn new(scheme: Scheme, n: usize, seed: u64) -> Self {
        Self {
            scheme,
            n,
            seed,
            stream: 0,
            z_intercept: false,
        }
    }
}

/// What generated a simulated sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    /// Latent structural-zero indicator.
    pub w: Vec<bool>,
    pub m: Vec<f64>,
    pub contaminated: Vec<bool>,
    pub outliers: Vec<usize>,
    pub false_zeros: Vec<usize>,
}

pub fn gen_scheme(cfg: &SchemeConfig) -> Result<(Dataset, Truth)> {
    let n = cfg.n;
    if n < 10 {
        return Err(PlzipError::Argument("simulated samples need n ≥ 10".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(cfg.stream);
    let mut x = Vec::with_capacity(2 * n);
    let mut z = Vec::with_capacity(3 * n);
    let mut t = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(n);
    let mut m = Vec::with_capacity(n);
    for i in 0..n {
        let x1 = if i < n / 2 { 1.0 } else { 0.0 };
        let x2: f64 = rng.random();
        let ti = -2.0 + 4.0 * rng.random::<f64>();
        let z1: f64 = rng.random();
        let z2: f64 = StandardNormal.sample(&mut rng);
        let structural = rng.random::<f64>() < logistic(TRUE_GAMMA[0] * z1 + TRUE_GAMMA[1] * z2);
        let mi = true_m(ti);
        let lambda = (TRUE_BETA[0] * x1 + TRUE_BETA[1] * x2 + mi).exp();
        let draw = Poisson::new(lambda).expect("positive mean").sample(&mut rng) as u64;
        x.extend([x1, x2]);
        if cfg.z_intercept {
            z.push(1.0);
        }
        z.extend([z1, z2]);
        t.push(ti);
        w.push(structural);
        m.push(mi);
        y.push(if structural { 0 } else { draw });
    }
    let (k_out, k_zero) = cfg.scheme.contamination_sizes(n);
    let chosen = sample(&mut rng, n, k_out + k_zero).into_vec();
    let outliers = chosen[..k_out].to_vec();
    let false_zeros = chosen[k_out..].to_vec();
    for &i in &outliers {
        y[i] += OUTLIER_SHIFT;
    }
    for &i in &false_zeros {
        x[2 * i + 1] = 1.0 + rng.random::<f64>();
        y[i] = 0;
    }
    let mut contaminated = vec![false; n];
    for &i in chosen.iter() {
        contaminated[i] = true;
    }
    let q = if cfg.z_intercept { 3 } else { 2 };
    let mut gamma = TRUE_GAMMA.to_vec();
    if cfg.z_intercept {
        gamma.insert(0, 0.0);
    }
    let data = Dataset::new(y, RowMatrix::new(n, 2, x), RowMatrix::new(n, q, z), t)?;
    Ok((
        data,
        Truth {
            beta: TRUE_BETA.to_vec(),
            gamma,
            w,
            m,
            contaminated,
            outliers,
            false_zeros,
        },
    ))
}

/// Root mean squared difference of two aligned sequences.
pub fn rmse_m(estimate: &[f64], truth: &[f64]) -> Result<f64> {
    if estimate.len() != truth.len() || estimate.is_empty() {
        return Err(PlzipError::Argument(format!(
            "length mismatch: {} estimates for {} true values",
            estimate.len(),
            truth.len()
        )));
    }
    let ss: f64 = estimate.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((ss / estimate.len() as f64).sqrt())
}

pub fn euclidean_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// How the study picks the bandwidth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BandwidthPolicy {
    /// One value for every loss.
    Fixed(f64),
    /// One value per loss.
    PerLoss(Vec<(LossFamily, f64)>),
    /// Cross-validate the first `pilot` uncontaminated replications of each
    /// loss, then use the average everywhere.
    Frozen { folds: usize, grid: Vec<f64>, pilot: usize },
    /// Cross-validate every replication.
    PerReplication { folds: usize, grid: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub schemes: Vec<Scheme>,
    pub losses: Vec<LossFamily>,
    pub reps: usize,
    pub n: usize,
    pub seed: u64,
    pub bandwidth: BandwidthPolicy,
    pub fit: FitConfig,
    pub z_intercept: bool,
    /// Run one more EM cycle after every converged fit and record how far
    /// it moves `(β̂, γ̂)`.
    #[serde(default)]
    pub fixed_point_check: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub scheme: Scheme,
    pub loss: LossFamily,
    pub rep: usize,
    pub n: usize,
    pub h: f64,
    pub beta_error: f64,
    pub gamma_error: f64,
    pub rmse_m: f64,
    pub converged: bool,
    pub iterations: usize,
    pub score_norm: f64,
    /// Largest change of `(β̂, γ̂)` over one extra EM cycle, when checked.
    pub cycle_shift: Option<f64>,
    pub wall_time_s: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyOutput {
    pub rows: Vec<StudyRow>,
    /// Bandwidth used per loss, when it does not vary by replication.
    pub bandwidths: Vec<(LossFamily, f64)>,
}

fn scheme_config(study: &StudyConfig, scheme: Scheme, rep: usize) -> SchemeConfig {
    SchemeConfig {
        scheme,
        n: study.n,
        seed: study.seed,
        stream: rep as u64,
        z_intercept: study.z_intercept,
    }
}

fn cv_for(study: &StudyConfig, spec: &LossSpec, data: &Dataset, folds: usize, grid: &[f64], rep: usize) -> Option<f64> {
    cv_bandwidth(data, spec, folds, grid, study.seed ^ rep as u64, &study.fit)
        .ok()
        .map(|o| o.h)
}

/// Averaged cross-validated bandwidth over the first `pilot` C0 replications.
pub fn pilot_bandwidth(study: &StudyConfig, loss: LossFamily, folds: usize, grid: &[f64], pilot: usize) -> Result<f64> {
    let spec = LossSpec::new(loss, None)?;
    let picks: Vec<Option<f64>> = (0..pilot)
        .into_par_iter()
        .map(|rep| {
            let (data, _) = gen_scheme(&scheme_config(study, Scheme::C0, rep)).ok()?;
            cv_for(study, &spec, &data, folds, grid, rep)
        })
        .collect();
    let chosen: Vec<f64> = picks.into_iter().flatten().collect();
    if chosen.is_empty() {
        return Err(PlzipError::SelectionFailure);
    }
    Ok(chosen.iter().sum::<f64>() / chosen.len() as f64)
}

fn fit_row(study: &StudyConfig, scheme: Scheme, loss: LossFamily, rep: usize, h: Option<f64>) -> StudyRow {
    let start = Instant::now();
    let mut row = StudyRow {
        scheme,
        loss,
        rep,
        n: study.n,
        h: h.unwrap_or(f64::NAN),
        beta_error: f64::NAN,
        gamma_error: f64::NAN,
        rmse_m: f64::NAN,
        converged: false,
        iterations: 0,
        score_norm: f64::NAN,
        cycle_shift: None,
        wall_time_s: 0.0,
        error: None,
    };
    let result = (|| -> Result<()> {
        let spec = LossSpec::new(loss, None)?;
        let (data, truth) = gen_scheme(&scheme_config(study, scheme, rep))?;
        let h = match (h, &study.bandwidth) {
            (Some(h), _) => h,
            (None, BandwidthPolicy::PerReplication { folds, grid }) => {
                cv_for(study, &spec, &data, *folds, grid, rep).ok_or(PlzipError::SelectionFailure)?
            }
            (None, _) => return Err(PlzipError::SelectionFailure),
        };
        row.h = h;
        let kernel = KernelConfig::gaussian(h)?;
        let ctx = FitContext::new(&data, &spec, &kernel, &study.fit)?;
        let fit = ctx.run()?;
        if study.fixed_point_check && fit.converged {
            let next = ctx.refine_once(&fit)?;
            let shift = next
                .beta
                .iter()
                .zip(&fit.theta.beta)
                .chain(next.gamma.iter().zip(&fit.theta.gamma))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            row.cycle_shift = Some(shift);
        }
        row.beta_error = euclidean_distance(&fit.theta.beta, &truth.beta);
        row.gamma_error = euclidean_distance(&fit.theta.gamma, &truth.gamma);
        row.rmse_m = rmse_m(&fit.theta.m(), &truth.m)?;
        row.converged = fit.converged;
        row.iterations = fit.iterations;
        row.score_norm = fit.score_norm;
        Ok(())
    })();
    if let Err(e) = result {
        row.error = Some(e.to_string());
    }
    row.wall_time_s = start.elapsed().as_secs_f64();
    row
}

/// Runs every (scheme, loss, replication) cell. Rows come back in scheme,
/// loss, replication order whatever the thread count.
pub fn run_study(study: &StudyConfig) -> Result<StudyOutput> {
    if study.reps == 0 {
        return Err(PlzipError::Argument("reps must be at least 1".into()));
    }
    let mut bandwidths: Vec<(LossFamily, f64)> = Vec::new();
    for &loss in &study.losses {
        let h = match &study.bandwidth {
            BandwidthPolicy::Fixed(h) => Some(*h),
            BandwidthPolicy::PerLoss(list) => Some(
                list.iter()
                    .find(|(l, _)| *l == loss)
                    .map(|(_, h)| *h)
                    .ok_or_else(|| PlzipError::Argument(format!("no bandwidth given for loss {loss}")))?,
            ),
            BandwidthPolicy::Frozen { folds, grid, pilot } => {
                Some(pilot_bandwidth(study, loss, *folds, grid, *pilot)?)
            }
            BandwidthPolicy::PerReplication { .. } => None,
        };
        if let Some(h) = h {
            bandwidths.push((loss, h));
        }
    }
    let mut jobs = Vec::new();
    for &scheme in &study.schemes {
        for &loss in &study.losses {
            for rep in 0..study.reps {
                jobs.push((scheme, loss, rep));
            }
        }
    }
    let rows = jobs
        .par_iter()
        .map(|&(scheme, loss, rep)| {
            let h = bandwidths.iter().find(|(l, _)| *l == loss).map(|(_, h)| *h);
            fit_row(study, scheme, loss, rep, h)
        })
        .collect();
    Ok(StudyOutput { rows, bandwidths })
}

/// Median and raw MAD of one metric over the finite values of a cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub median: f64,
    pub mad: f64,
}

impl Spread {
    fn of(values: impl Iterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            Spread {
                median: f64::NAN,
                mad: f64::NAN,
            }
        } else {
            Spread {
                median: median(&v),
                mad: mad(&v),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scheme: Scheme,
    pub loss: LossFamily,
    pub reps: usize,
    pub converged: usize,
    pub h: f64,
    pub beta_error: Spread,
    pub gamma_error: Spread,
    pub rmse_m: Spread,
}

pub fn summarize(rows: &[StudyRow]) -> Vec<SummaryRow> {
    let mut keys: Vec<(Scheme, LossFamily)> = Vec::new();
    for r in rows {
        if !keys.contains(&(r.scheme, r.loss)) {
            keys.push((r.scheme, r.loss));
        }
    }
    keys.into_iter()
        .map(|(scheme, loss)| {
            let cell: Vec<&StudyRow> = rows.iter().filter(|r| r.scheme == scheme && r.loss == loss).collect();
            SummaryRow {
                scheme,
                loss,
                reps: cell.len(),
                converged: cell.iter().filter(|r| r.converged).count(),
                h: Spread::of(cell.iter().map(|r| r.h)).median,
                beta_error: Spread::of(cell.iter().map(|r| r.beta_error)),
                gamma_error: Spread::of(cell.iter().map(|r| r.gamma_error)),
                rmse_m: Spread::of(cell.iter().map(|r| r.rmse_m)),
            }
        })
        .collect()
}

pub fn find_summary(summary: &[SummaryRow], scheme: Scheme, loss: LossFamily) -> Option<&SummaryRow> {
    summary.iter().find(|r| r.scheme == scheme && r.loss == loss)
}

pub const STUDY_HEADER: [&str; 14] = [
    "scheme",
    "loss",
    "rep",
    "n",
    "h",
    "beta_error",
    "gamma_error",
    "rmse_m",
    "converged",
    "iterations",
    "score_norm",
    "cycle_shift",
    "wall_time_s",
    "error",
];

pub fn write_rows<W: std::io::Write>(out: W, rows: &[StudyRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(STUDY_HEADER)?;
    for r in rows {
        w.write_record([
            r.scheme.to_string(),
            r.loss.to_string(),
            r.rep.to_string(),
            r.n.to_string(),
            r.h.to_string(),
            r.beta_error.to_string(),
            r.gamma_error.to_string(),
            r.rmse_m.to_string(),
            (r.converged as u8).to_string(),
            r.iterations.to_string(),
            r.score_norm.to_string(),
            r.cycle_shift.map(|v| v.to_string()).unwrap_or_default(),
            r.wall_time_s.to_string(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub const SUMMARY_HEADER: [&str; 11] = [
    "scheme",
    "loss",
    "reps",
    "converged",
    "h",
    "beta_error_median",
    "beta_error_mad",
    "gamma_error_median",
    "gamma_error_mad",
    "rmse_m_median",
    "rmse_m_mad",
];

pub fn write_summary<W: std::io::Write>(out: W, summary: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_HEADER)?;
    for r in summary {
        w.write_record([
            r.scheme.to_string(),
            r.loss.to_string(),
            r.reps.to_string(),
            r.converged.to_string(),
            r.h.to_string(),
            r.beta_error.median.to_string(),
            r.beta_error.mad.to_string(),
            r.gamma_error.median.to_string(),
            r.gamma_error.mad.to_string(),
            r.rmse_m.median.to_string(),
            r.rmse_m.mad.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Mean after dropping `frac` of the values from each tail.
pub fn trimmed_mean(values: &[f64], frac: f64) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let cut = (frac * v.len() as f64).floor() as usize;
    let kept = &v[cut..v.len() - cut];
    if kept.is_empty() {
        return median(&v);
    }
    kept.iter().sum::<f64>() / kept.len() as f64
}

/// Per-fold trimmed mean of squared prediction errors `(y − (1 − π̂) λ̂)²`.
pub fn prediction_error(
    data: &Dataset,
    spec: &LossSpec,
    h: f64,
    folds: usize,
    seed: u64,
    trim: f64,
    cfg: &FitConfig,
) -> Result<Vec<f64>> {
    if folds < 2 {
        return Err(PlzipError::Argument("at least two folds are required".into()));
    }
    let labels = fold_labels(data.len(), folds, seed);
    let kernel = KernelConfig::gaussian(h)?;
    (0..folds)
        .map(|f| {
            let train_idx: Vec<usize> = (0..data.len()).filter(|&i| labels[i] != f).collect();
            let test_idx: Vec<usize> = (0..data.len()).filter(|&i| labels[i] == f).collect();
            let train = data.subset(&train_idx);
            let fit = em_fit(&train, spec, &kernel, cfg)?;
            let predictor = Predictor::new(&train, spec, &fit)?;
            let errors = test_idx
                .iter()
                .map(|&i| {
                    let mu = predictor.predict_mean(data.x.row(i), data.z.row(i), data.t[i])?;
                    Ok((data.y[i] as f64 - mu).powi(2))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(trimmed_mean(&errors, trim))
        })
        .collect()
}

/// Zero-inflated Poisson mean at the true parameters, for reference.
pub fn true_mean(x: &[f64], z: &[f64], t: f64) -> f64 {
    (1.0 - logistic(dot(z, &TRUE_GAMMA))) * (dot(x, &TRUE_BETA) + true_m(t)).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_data() {
        let cfg = SchemeConfig::new(Scheme::C0, 200, 42);
        let (a, _) = gen_scheme(&cfg).unwrap();
        let (b, _) = gen_scheme(&cfg).unwrap();
        assert_eq!(a, b);
        let (c, _) = gen_scheme(&SchemeConfig::new(Scheme::C0, 200, 43)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn response_outliers_are_shifted_copies() {
        let n = 500;
        let (base, _) = gen_scheme(&SchemeConfig::new(Scheme::C0, n, 7)).unwrap();
        let (c1, truth) = gen_scheme(&SchemeConfig::new(Scheme::C1, n, 7)).unwrap();
        assert_eq!(truth.outliers.len(), n / 10);
        assert_eq!(truth.contaminated.iter().filter(|&&c| c).count(), n / 10);
        for i in 0..n {
            if truth.contaminated[i] {
                assert_eq!(c1.y[i], base.y[i] + OUTLIER_SHIFT);
                assert!(c1.y[i] > 69);
            } else {
                assert_eq!(c1.y[i], base.y[i]);
            }
        }
        assert_eq!(c1.x, base.x);
    }

    #[test]
    fn false_zeros_have_large_x2() {
        let n = 500;
        let (c2, truth) = gen_scheme(&SchemeConfig::new(Scheme::C2, n, 3)).unwrap();
        let flagged = (0..n).filter(|&i| c2.x.row(i)[1] >= 1.0 && c2.y[i] == 0).count();
        assert_eq!(flagged, n / 10);
        assert_eq!(truth.false_zeros.len(), n / 10);
    }

    #[test]
    fn mixed_scheme_subsets_are_disjoint() {
        let (_, truth) = gen_scheme(&SchemeConfig::new(Scheme::C3, 500, 5)).unwrap();
        assert_eq!(truth.outliers.len(), 25);
        assert_eq!(truth.false_zeros.len(), 25);
        assert!(truth.outliers.iter().all(|i| !truth.false_zeros.contains(i)));
        assert_eq!(truth.contaminated.iter().filter(|&&c| c).count(), 50);
    }

    #[test]
    fn smooth_component_is_bounded_and_centred() {
        let (_, truth) = gen_scheme(&SchemeConfig::new(Scheme::C0, 20_000, 1)).unwrap();
        assert!(truth.m.iter().all(|m| m.abs() <= 1.0));
        let mean = truth.m.iter().sum::<f64>() / truth.m.len() as f64;
        assert!(mean.abs() < 0.02);
    }

    #[test]
    fn covariate_recipe() {
        let (d, _) = gen_scheme(&SchemeConfig::new(Scheme::C0, 100, 9)).unwrap();
        assert!((0..50).all(|i| d.x.row(i)[0] == 1.0));
        assert!((50..100).all(|i| d.x.row(i)[0] == 0.0));
        assert!(d.t.iter().all(|t| (-2.0..=2.0).contains(t)));
        assert_eq!(d.q(), 2);
        let mut cfg = SchemeConfig::new(Scheme::C0, 100, 9);
        cfg.z_intercept = true;
        let (d, truth) = gen_scheme(&cfg).unwrap();
        assert_eq!(d.z.intercept_column(), Some(0));
        assert_eq!(truth.gamma, vec![0.0, -1.0, 1.0]);
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse_m(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((rmse_m(&[1.5, 2.5, -0.5], &[1.0, 2.0, -1.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!((rmse_m(&[0.0, 1.0], &[1.0, 1.0]).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        assert!(rmse_m(&[0.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn trimming_drops_both_tails() {
        let v: Vec<f64> = (1..=10).map(|k| k as f64).collect();
        assert!((trimmed_mean(&v, 0.2) - 5.5).abs() < 1e-15);
        let mut w = v.clone();
        w[9] = 1e9;
        assert!((trimmed_mean(&w, 0.2) - 5.5).abs() < 1e-15);
    }
}
