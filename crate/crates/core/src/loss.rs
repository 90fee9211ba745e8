//! Robust loss family for the Poisson component.
//!
//! Three families share one interface:
//!
//! * `Ml`: the Poisson deviance argument itself, `ρ(y,u) = e^u − y(u + 1 − ln y)`,
//!   whose derivative is the classical score `e^u − y`.
//! * `Ch`: a bounded transform `φ_CH` of the deviance argument plus the
//!   correction `G(e^u)` that restores conditional Fisher consistency.
//! * `Mt`: Tukey's biweight applied to `√y − f(e^u)`, where `f(λ)` is the
//!   minimizer of the expected loss under Poisson(λ).
//!
//! `G` and `f` have no closed form. Both are tabulated once per tuning
//! constant on a log-spaced grid and shared between all `LossSpec` clones.

use std::collections::HashMap;
use std::f64::consts::LN_10;
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{PlzipError, Result};
use crate::numeric::{
    adaptive_simpson, ln_poisson_pmf, poisson_window, x_ln_x, LinearAntiderivative, UniformHermite,
};
use crate::optim::{brent_minimize, brent_root};

/// Default tuning constant for `φ_CH`.
pub const CH_DEFAULT_C: f64 = 0.5;
/// Default tuning constant for `φ_MT`.
pub const MT_DEFAULT_C: f64 = 2.9;

/// Reference point where the correction antiderivative is pinned to zero.
pub const G_REFERENCE: f64 = 1e-3;

const TABLE_KNOTS: usize = 400;
/// The correction slope has kinks wherever a deviance term crosses `c`, so it
/// is sampled much more densely than the smooth centering function.
const CORRECTION_KNOTS: usize = 1 << 15;
const TABLE_LN_MIN: f64 = -4.0 * LN_10;
const TABLE_LN_MAX: f64 = 4.0 * LN_10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossFamily {
    Ml,
    Ch,
    Mt,
}

impl LossFamily {
    pub fn default_c(self) -> Option<f64> {
        match self {
            LossFamily::Ml => None,
            LossFamily::Ch => Some(CH_DEFAULT_C),
            LossFamily::Mt => Some(MT_DEFAULT_C),
        }
    }

    pub fn is_robust(self) -> bool {
        self != LossFamily::Ml
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LossFamily::Ml => "ml",
            LossFamily::Ch => "ch",
            LossFamily::Mt => "mt",
        }
    }
}

impl std::str::FromStr for LossFamily {
    type Err = PlzipError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ml" => Ok(LossFamily::Ml),
            "ch" => Ok(LossFamily::Ch),
            "mt" => Ok(LossFamily::Mt),
            other => Err(PlzipError::Argument(format!("unknown loss family `{other}`"))),
        }
    }
}

impl std::fmt::Display for LossFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A count observation with the per-observation constants the losses reuse.
#[derive(Debug, Clone, Copy)]
pub struct Count {
    pub y: f64,
    y_log_y: f64,
    sqrt_y: f64,
}

impl Count {
    pub fn new(y: u64) -> Self {
        let yf = y as f64;
        Self {
            y: yf,
            y_log_y: x_ln_x(yf),
            sqrt_y: yf.sqrt(),
        }
    }

    /// `e^u − y(u + 1 − ln y)`, with `y ln y = 0` at `y = 0`.
    #[inline]
    pub fn dev_arg(&self, u: f64) -> f64 {
        u.exp() - self.y * (u + 1.0) + self.y_log_y
    }
}

/// Deviance argument `s = e^u − y(u + 1 − ln y)`.
pub fn dev_arg(y: u64, u: f64) -> f64 {
    Count::new(y).dev_arg(u)
}

#[inline]
fn phi_ch(s: f64, c: f64) -> f64 {
    let rc = c.sqrt();
    if s <= c {
        s * (-rc).exp()
    } else {
        let rs = s.sqrt();
        (-rc).exp() * (2.0 * (1.0 + rc) + c) - 2.0 * (-rs).exp() * (1.0 + rs)
    }
}

#[inline]
fn dphi_ch(s: f64, c: f64) -> f64 {
    if s <= c {
        (-c.sqrt()).exp()
    } else {
        (-s.sqrt()).exp()
    }
}

#[inline]
fn d2phi_ch(s: f64, c: f64) -> f64 {
    if s <= c {
        0.0
    } else {
        let rs = s.sqrt();
        -(-rs).exp() / (2.0 * rs)
    }
}

#[inline]
fn phi_mt(s: f64, c: f64) -> f64 {
    let q = (s / c) * (s / c);
    if q >= 1.0 {
        1.0
    } else {
        1.0 - (1.0 - q).powi(4)
    }
}

#[inline]
fn dphi_mt(s: f64, c: f64) -> f64 {
    let q = (s / c) * (s / c);
    if q >= 1.0 {
        0.0
    } else {
        8.0 * s / (c * c) * (1.0 - q).powi(3)
    }
}

#[inline]
fn d2phi_mt(s: f64, c: f64) -> f64 {
    let q = (s / c) * (s / c);
    if q >= 1.0 {
        0.0
    } else {
        8.0 / (c * c) * (1.0 - q).powi(2) * (1.0 - 7.0 * q)
    }
}

/// `G'(s)`: the integrand of the Fisher-consistency correction, summed
/// directly over the Poisson support.
fn correction_deriv_direct(s: f64, c: f64) -> f64 {
    let ln_s = s.ln();
    let mut total = -dphi_ch(s, c) * (-s).exp();
    let (lo, hi) = poisson_window(s);
    for j in lo.max(1)..=hi {
        let jf = j as f64;
        let sj = (s - jf * (ln_s + 1.0) + x_ln_x(jf)).max(0.0);
        let w = ln_poisson_pmf(j, s).exp();
        if w == 0.0 {
            continue;
        }
        total += dphi_ch(sj, c) * w * (jf - s) / s;
    }
    total
}

/// `d/dx G(e^x) = G'(e^x) e^x`.
fn correction_slope_direct(x: f64, c: f64) -> f64 {
    let s = x.exp();
    correction_deriv_direct(s, c) * s
}

/// `f(λ) = argmin_u E_λ φ_MT(√y − u)`: coarse scan, then a bracketed root of
/// the first-order condition `E_λ φ'_MT(√y − u) = 0`.
fn mt_center_direct(lambda: f64, c: f64) -> f64 {
    if lambda <= 0.0 {
        return 0.0;
    }
    let (lo, hi) = poisson_window(lambda);
    let support: Vec<(f64, f64)> = (lo..=hi)
        .filter_map(|j| {
            let w = ln_poisson_pmf(j, lambda).exp();
            (w > 0.0).then(|| ((j as f64).sqrt(), w))
        })
        .collect();
    let expected = |u: f64| support.iter().map(|&(r, w)| w * phi_mt(r - u, c)).sum::<f64>();
    let slope = |u: f64| -support.iter().map(|&(r, w)| w * dphi_mt(r - u, c)).sum::<f64>();

    let u_lo = (lo as f64).sqrt() - 0.5;
    let u_hi = (hi as f64).sqrt() + 0.5;
    let step = 0.02;
    let steps = ((u_hi - u_lo) / step).ceil() as usize;
    let mut best = (u_lo, f64::INFINITY);
    for k in 0..=steps {
        let u = u_lo + k as f64 * step;
        let v = expected(u);
        if v < best.1 {
            best = (u, v);
        }
    }
    let (a, b) = (best.0 - step, best.0 + step);
    match brent_root(slope, a, b, 1e-15) {
        Some(u) => u,
        None => brent_minimize(expected, a, b, 1e-12).0,
    }
}

type TableKey = (LossFamily, u64);

fn center_cache() -> &'static Mutex<HashMap<TableKey, Arc<UniformHermite>>> {
    static CACHE: OnceLock<Mutex<HashMap<TableKey, Arc<UniformHermite>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

fn correction_cache() -> &'static Mutex<HashMap<TableKey, Arc<LinearAntiderivative>>> {
    static CACHE: OnceLock<Mutex<HashMap<TableKey, Arc<LinearAntiderivative>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

fn cached<T>(
    cache: &Mutex<HashMap<TableKey, Arc<T>>>,
    family: LossFamily,
    c: f64,
    build: fn(f64) -> T,
) -> Arc<T> {
    let key = (family, c.to_bits());
    if let Some(t) = cache.lock().expect("table cache poisoned").get(&key) {
        return Arc::clone(t);
    }
    let table = Arc::new(build(c));
    cache
        .lock()
        .expect("table cache poisoned")
        .entry(key)
        .or_insert(table)
        .clone()
}

fn grid_dx() -> f64 {
    (TABLE_LN_MAX - TABLE_LN_MIN) / (TABLE_KNOTS - 1) as f64
}

fn build_center_table(c: f64) -> UniformHermite {
    let dx = grid_dx();
    let values = (0..TABLE_KNOTS)
        .map(|k| mt_center_direct((TABLE_LN_MIN + k as f64 * dx).exp(), c))
        .collect();
    UniformHermite::monotone(TABLE_LN_MIN, dx, values)
}

/// `G(e^x)` on the log grid: the slope `G'(e^x) e^x` is sampled densely and
/// integrated exactly as a piecewise-linear function, then shifted so that
/// `G(G_REFERENCE) = 0`.
fn build_correction_table(c: f64) -> LinearAntiderivative {
    let dx = (TABLE_LN_MAX - TABLE_LN_MIN) / (CORRECTION_KNOTS - 1) as f64;
    let samples = (0..CORRECTION_KNOTS)
        .map(|k| correction_slope_direct(TABLE_LN_MIN + k as f64 * dx, c))
        .collect();
    let mut table = LinearAntiderivative::new(TABLE_LN_MIN, dx, samples);
    table.pin_zero_at(G_REFERENCE.ln());
    table
}

/// Loss family, tuning constant and the precomputed tables it needs.
#[derive(Debug, Clone)]
pub struct LossSpec {
    family: LossFamily,
    c: f64,
    g_table: Option<Arc<LinearAntiderivative>>,
    f_table: Option<Arc<UniformHermite>>,
}

impl LossSpec {
    pub fn ml() -> Self {
        Self {
            family: LossFamily::Ml,
            c: f64::NAN,
            g_table: None,
            f_table: None,
        }
    }

    pub fn ch(c: f64) -> Result<Self> {
        check_c(c)?;
        Ok(Self {
            family: LossFamily::Ch,
            c,
            g_table: Some(cached(correction_cache(), LossFamily::Ch, c, build_correction_table)),
            f_table: None,
        })
    }

    pub fn mt(c: f64) -> Result<Self> {
        check_c(c)?;
        Ok(Self {
            family: LossFamily::Mt,
            c,
            g_table: None,
            f_table: Some(cached(center_cache(), LossFamily::Mt, c, build_center_table)),
        })
    }

    /// Builds the family with `c`, falling back to the family default.
    pub fn new(family: LossFamily, c: Option<f64>) -> Result<Self> {
        match family {
            LossFamily::Ml => Ok(Self::ml()),
            LossFamily::Ch => Self::ch(c.unwrap_or(CH_DEFAULT_C)),
            LossFamily::Mt => Self::mt(c.unwrap_or(MT_DEFAULT_C)),
        }
    }

    pub fn family(&self) -> LossFamily {
        self.family
    }

    /// Tuning constant, `None` for the likelihood family.
    pub fn c(&self) -> Option<f64> {
        (self.family != LossFamily::Ml).then_some(self.c)
    }

    /// Knots `(s, G(s))` of the correction table.
    pub fn correction_knots(&self) -> Option<Vec<(f64, f64)>> {
        self.g_table
            .as_ref()
            .map(|t| t.knots().map(|(x, v)| (x.exp(), v)).collect())
    }

    /// Knots `(λ, f(λ))` of the centering table.
    pub fn center_knots(&self) -> Option<Vec<(f64, f64)>> {
        self.f_table
            .as_ref()
            .map(|t| t.knots().map(|(x, v)| (x.exp(), v)).collect())
    }

    /// `φ(s)`.
    pub fn phi(&self, s: f64) -> Result<f64> {
        match self.family {
            LossFamily::Ml => Ok(s),
            LossFamily::Ch => {
                if s < 0.0 {
                    return Err(PlzipError::Domain { what: "phi_CH argument", value: s });
                }
                Ok(phi_ch(s, self.c))
            }
            LossFamily::Mt => Ok(phi_mt(s, self.c)),
        }
    }

    /// `φ'(s)`.
    pub fn dphi(&self, s: f64) -> Result<f64> {
        match self.family {
            LossFamily::Ml => Ok(1.0),
            LossFamily::Ch => {
                if s < 0.0 {
                    return Err(PlzipError::Domain { what: "phi_CH argument", value: s });
                }
                Ok(dphi_ch(s, self.c))
            }
            LossFamily::Mt => Ok(dphi_mt(s, self.c)),
        }
    }

    /// `f(λ)`, the MT centering function. Table-backed inside the grid.
    pub fn mt_center(&self, lambda: f64) -> Result<f64> {
        if !(lambda >= 0.0) {
            return Err(PlzipError::Domain { what: "Poisson mean", value: lambda });
        }
        let c = self.require(LossFamily::Mt)?;
        if lambda == 0.0 {
            return Ok(0.0);
        }
        let x = lambda.ln();
        match &self.f_table {
            Some(t) if t.contains(x) => Ok(t.eval(x)),
            _ => Ok(mt_center_direct(lambda, c)),
        }
    }

    /// `G'(s)` by direct summation of the Poisson series.
    pub fn correction_deriv(&self, s: f64) -> Result<f64> {
        let c = self.require(LossFamily::Ch)?;
        if !(s > 0.0) {
            return Err(PlzipError::Domain { what: "correction argument", value: s });
        }
        Ok(correction_deriv_direct(s, c))
    }

    /// `G(s)` with `G(G_REFERENCE) = 0`. Table-backed inside the grid.
    pub fn correction(&self, s: f64) -> Result<f64> {
        self.require(LossFamily::Ch)?;
        if !(s > 0.0) {
            return Err(PlzipError::Domain { what: "correction argument", value: s });
        }
        Ok(self.correction_u(s.ln()).0)
    }

    /// `G(s)` by adaptive Simpson quadrature of `G'` from the reference point.
    pub fn correction_by_quadrature(&self, s: f64, tol: f64) -> Result<f64> {
        let c = self.require(LossFamily::Ch)?;
        if !(s > 0.0) {
            return Err(PlzipError::Domain { what: "correction argument", value: s });
        }
        Ok(adaptive_simpson(
            |x| correction_slope_direct(x, c),
            G_REFERENCE.ln(),
            s.ln(),
            tol,
        ))
    }

    fn require(&self, family: LossFamily) -> Result<f64> {
        if self.family == family {
            Ok(self.c)
        } else {
            Err(PlzipError::Argument(format!(
                "operation requires the {family} family, got {}",
                self.family
            )))
        }
    }

    /// `(G(e^u), dG(e^u)/du, d²G(e^u)/du²)`.
    ///
    /// Past the grid the slope `G'(e^u) e^u` is continued analytically: it
    /// decays like `e^u` at the small end and is held constant at the large end.
    fn correction_u(&self, u: f64) -> (f64, f64, f64) {
        let table = self.g_table.as_ref().expect("CH spec carries its table");
        if table.contains(u) {
            return table.eval(u);
        }
        if u < table.x_min() {
            let (g0, q0, _) = table.eval(table.x_min());
            let r = (u - table.x_min()).exp();
            (g0 + q0 * (r - 1.0), q0 * r, q0 * r)
        } else {
            let (g1, q1, _) = table.eval(table.x_max());
            (g1 + q1 * (u - table.x_max()), q1, 0.0)
        }
    }

    /// `(f(e^u), d/du, d²/du²)` from the table interpolant. Past the grid
    /// `f` is continued as linear in `λ` below and as `√λ` plus a constant above.
    fn center_u(&self, u: f64) -> (f64, f64, f64) {
        let table = self.f_table.as_ref().expect("MT spec carries its table");
        if table.contains(u) {
            return table.eval2(u);
        }
        if u < table.x_min() {
            let f = table.eval(table.x_min()) * (u - table.x_min()).exp();
            (f, f, f)
        } else {
            let root = (0.5 * u).exp();
            let f = table.eval(table.x_max()) + root - (0.5 * table.x_max()).exp();
            (f, 0.5 * root, 0.25 * root)
        }
    }

    /// `ρ(y, u)`.
    #[inline]
    pub(crate) fn value(&self, obs: &Count, u: f64) -> f64 {
        match self.family {
            LossFamily::Ml => obs.dev_arg(u),
            LossFamily::Ch => {
                let s = obs.dev_arg(u).max(0.0);
                phi_ch(s, self.c) + self.correction_u(u).0
            }
            LossFamily::Mt => {
                let table = self.f_table.as_ref().expect("MT spec carries its table");
                let center = if table.contains(u) {
                    table.eval(u)
                } else {
                    self.center_u(u).0
                };
                phi_mt(obs.sqrt_y - center, self.c)
            }
        }
    }

    /// `(ρ, Ψ, ∂Ψ/∂u)` at `(y, u)`.
    #[inline]
    pub(crate) fn eval(&self, obs: &Count, u: f64) -> (f64, f64, f64) {
        match self.family {
            LossFamily::Ml => {
                let e = u.exp();
                (obs.dev_arg(u), e - obs.y, e)
            }
            LossFamily::Ch => {
                let e = u.exp();
                let s = obs.dev_arg(u).max(0.0);
                let (g, g1, g2) = self.correction_u(u);
                let r = e - obs.y;
                let d1 = dphi_ch(s, self.c);
                (
                    phi_ch(s, self.c) + g,
                    d1 * r + g1,
                    d2phi_ch(s, self.c) * r * r + d1 * e + g2,
                )
            }
            LossFamily::Mt => {
                let (f, f1, f2) = self.center_u(u);
                let r = obs.sqrt_y - f;
                let d1 = dphi_mt(r, self.c);
                (
                    phi_mt(r, self.c),
                    -d1 * f1,
                    d2phi_mt(r, self.c) * f1 * f1 - d1 * f2,
                )
            }
        }
    }

    /// `ρ(y, u)`.
    pub fn rho(&self, y: u64, u: f64) -> f64 {
        self.value(&Count::new(y), u)
    }

    /// `Ψ(y, u) = ∂ρ/∂u`.
    pub fn psi(&self, y: u64, u: f64) -> f64 {
        self.eval(&Count::new(y), u).1
    }

    /// `Σ_j Ψ(j, u) Pois(j; e^u)`, which vanishes for a Fisher-consistent loss.
    pub fn fisher_consistency_check(&self, u: f64) -> f64 {
        let lambda = u.exp();
        let hi = (lambda + 10.0 * lambda.sqrt() + 30.0).ceil() as u64;
        (0..=hi)
            .map(|j| {
                let w = ln_poisson_pmf(j, lambda).exp();
                if w == 0.0 {
                    0.0
                } else {
                    self.psi(j, u) * w
                }
            })
            .sum()
    }
}

fn check_c(c: f64) -> Result<()> {
    if c > 0.0 && c.is_finite() {
        Ok(())
    } else {
        Err(PlzipError::Domain { what: "tuning constant", value: c })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dev_arg_examples() {
        assert!((dev_arg(0, 1.3) - 1.3f64.exp()).abs() < 1e-14);
        assert!(dev_arg(1, 0.0).abs() < 1e-15);
        assert!((dev_arg(2, 0.0) - (2.0 * 2f64.ln() - 1.0)).abs() < 1e-14);
        assert!((dev_arg(2, 0.0) - 0.386294).abs() < 1e-6);
    }

    #[test]
    fn phi_ch_examples() {
        let spec = LossSpec::ch(0.5).unwrap();
        assert!((spec.phi(0.25).unwrap() - 0.123268).abs() < 1e-6);
        let c: f64 = 0.5;
        let at_c = c * (-c.sqrt()).exp();
        assert!((phi_ch(c, c) - at_c).abs() < 1e-15);
        assert!((phi_ch(c + 1e-12, c) - at_c).abs() < 1e-11);
        assert!(spec.phi(-0.1).is_err());
        assert!(spec.dphi(-0.1).is_err());
    }

    #[test]
    fn phi_mt_examples() {
        let spec = LossSpec::mt(2.9).unwrap();
        assert_eq!(spec.phi(0.0).unwrap(), 0.0);
        assert_eq!(spec.phi(2.9).unwrap(), 1.0);
        assert_eq!(spec.phi(-7.0).unwrap(), 1.0);
        assert!((spec.phi(1.45).unwrap() - 0.683594).abs() < 1e-6);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        for c in [0.5, 1.3] {
            for s in [0.1, 0.49, 0.7, 3.0, 20.0] {
                let h = 1e-6;
                let fd = (phi_ch(s + h, c) - phi_ch(s - h, c)) / (2.0 * h);
                assert!((fd - dphi_ch(s, c)).abs() < 1e-8);
            }
        }
        for s in [-2.0, -0.3, 0.4, 1.9, 2.8] {
            let h = 1e-6;
            let fd = (phi_mt(s + h, 2.9) - phi_mt(s - h, 2.9)) / (2.0 * h);
            assert!((fd - dphi_mt(s, 2.9)).abs() < 1e-8);
            let fd2 = (dphi_mt(s + h, 2.9) - dphi_mt(s - h, 2.9)) / (2.0 * h);
            assert!((fd2 - d2phi_mt(s, 2.9)).abs() < 1e-6);
        }
    }

    #[test]
    fn psi_is_derivative_of_rho() {
        for spec in [LossSpec::ml(), LossSpec::ch(0.5).unwrap(), LossSpec::mt(2.9).unwrap()] {
            for y in [0u64, 1, 3, 12, 80] {
                for u in [-2.3, -0.4, 0.9, 2.2, 4.1] {
                    let obs = Count::new(y);
                    let h = 1e-6;
                    let fd = (spec.value(&obs, u + h) - spec.value(&obs, u - h)) / (2.0 * h);
                    let (_, psi, dpsi) = spec.eval(&obs, u);
                    assert!(
                        (fd - psi).abs() < 1e-6 * (1.0 + psi.abs()),
                        "{} y={y} u={u}: {fd} vs {psi}",
                        spec.family()
                    );
                    let fd2 = (spec.eval(&obs, u + h).1 - spec.eval(&obs, u - h).1) / (2.0 * h);
                    assert!(
                        (fd2 - dpsi).abs() < 1e-4 * (1.0 + dpsi.abs()),
                        "{} y={y} u={u}: {fd2} vs {dpsi}",
                        spec.family()
                    );
                }
            }
        }
    }

    #[test]
    fn ml_psi_is_poisson_score() {
        let spec = LossSpec::ml();
        for y in 0..30u64 {
            for k in -6..=8 {
                let u = 0.5 * k as f64;
                assert_eq!(spec.psi(y, u), u.exp() - y as f64);
            }
        }
        assert!(spec.psi(3, 3f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn correction_reference_and_limits() {
        let spec = LossSpec::ch(0.5).unwrap();
        assert!(spec.correction(G_REFERENCE).unwrap().abs() < 1e-10);
        // only the j = 0 and j = 1 terms survive as s → 0; the j = 1 term
        // decays like exp(−√(−ln s)), so it is kept explicitly here
        let s = 1e-9_f64;
        let s1 = s - s.ln() - 1.0;
        let expected = -dphi_ch(s, 0.5) * (-s).exp() + dphi_ch(s1, 0.5) * (-s).exp() * (1.0 - s);
        let got = spec.correction_deriv(s).unwrap();
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
        assert!(spec.correction_deriv(0.0).is_err());
        assert!(spec.correction(-1.0).is_err());
    }

    #[test]
    fn correction_vanishes_for_constant_dphi() {
        // with φ' ≡ 1 the series Σ_j Pois(j;s)(j−s)/s is identically zero
        for s in [0.01, 0.7, 4.0, 55.0] {
            let (lo, hi) = poisson_window(s);
            let mut total = -(-s).exp();
            for j in lo.max(1)..=hi {
                total += ln_poisson_pmf(j, s).exp() * (j as f64 - s) / s;
            }
            assert!(total.abs() < 1e-12, "s={s}: {total}");
        }
    }

    #[test]
    fn mt_center_limits() {
        let spec = LossSpec::mt(2.9).unwrap();
        assert_eq!(spec.mt_center(0.0).unwrap(), 0.0);
        assert!(spec.mt_center(-1.0).is_err());
        let f4 = spec.mt_center(4.0).unwrap();
        assert!((f4 - 2.0).abs() < 0.3, "{f4}");
        assert!(spec.psi(0, -30.0).abs() < 1e-10);
    }

    #[test]
    fn family_mismatch_is_reported() {
        assert!(LossSpec::ml().mt_center(1.0).is_err());
        assert!(LossSpec::mt(2.9).unwrap().correction(1.0).is_err());
        assert!(LossSpec::ch(0.0).is_err());
    }
}
