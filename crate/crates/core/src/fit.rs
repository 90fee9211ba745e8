//! EM-type estimation: E-step, the three-step M-step, scores and the
//! convergence loop.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{PlzipError, Result};
use crate::leverage::{build_leverage, Decay, LeverageWeights};
use crate::loss::{Count, LossFamily, LossSpec};
use crate::model::{dot, posterior_w, zip_mean, Dataset, ThetaEstimate};
use crate::numeric::{log1p_exp, logistic, logit, median};
use crate::optim::{brent_minimize, brent_root, nelder_mead, newton_minimize, NewtonOptions};
use crate::smoothing::KernelConfig;

/// Half-width of the η scan around the starting value.
pub const ETA_SCAN_HALF_WIDTH: f64 = 3.0;
pub const ETA_SCAN_STEP: f64 = 0.05;
/// The η scan only locates the basin, so it reads the rows within this many
/// bandwidths of τ; the polish that follows uses the whole window.
pub const SCAN_REACH: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub max_em_iters: usize,
    pub tol_param: f64,
    pub tol_score: f64,
    /// Random restarts per local problem at initialization.
    pub restarts: usize,
    pub seed: u64,
    /// Multiply the logistic weights by the leverage weight of `x`.
    /// `None` means on for robust losses.
    pub guard_false_zeros: Option<bool>,
    /// Use leverage weights at all. `None` means on for robust losses.
    pub leverage: Option<bool>,
    pub decay: Decay,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_em_iters: 100,
            tol_param: 1e-4,
            tol_score: 1e-3,
            restarts: 5,
            seed: 0,
            guard_false_zeros: None,
            leverage: None,
            decay: Decay::Smooth,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_em_iters < 1 {
            return Err(PlzipError::Argument("max_em_iters must be at least 1".into()));
        }
        if !(self.tol_param > 0.0 && self.tol_score > 0.0) {
            return Err(PlzipError::Argument("tolerances must be positive".into()));
        }
        Ok(())
    }

    pub fn uses_leverage(&self, family: LossFamily) -> bool {
        self.leverage.unwrap_or(family.is_robust())
    }

    pub fn guards_false_zeros(&self, family: LossFamily) -> bool {
        self.uses_leverage(family) && self.guard_false_zeros.unwrap_or(family.is_robust())
    }
}

/// Score residuals at the returned estimate.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreBlocks {
    /// Largest local score norm over the τ grid.
    pub local: f64,
    /// Largest scalar first-order residual of the final η refit.
    pub refit: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl ScoreBlocks {
    pub fn norm(&self) -> f64 {
        self.beta.hypot(self.gamma) + self.local.max(self.refit)
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub theta: ThetaEstimate,
    pub iterations: usize,
    pub converged: bool,
    pub score_norm: f64,
    pub scores: ScoreBlocks,
    /// `Q_β + Q_γ` after each iteration.
    pub objective_trace: Vec<f64>,
    /// Posterior weights at the returned estimate, aligned with the rows.
    pub w: Vec<f64>,
    /// Local `(β̃, η̃)` per row.
    pub local: Vec<Vec<f64>>,
    pub config: FitConfig,
    pub warnings: Vec<String>,
}

/// Kernel window around one τ over the t-sorted rows `lo..hi`.
#[derive(Debug, Clone)]
struct Window {
    lo: usize,
    weights: Vec<f64>,
    /// Offsets into `weights` of the rows within `SCAN_REACH` bandwidths.
    core: (usize, usize),
}

impl Window {
    fn range(&self) -> std::ops::Range<usize> {
        self.lo..self.lo + self.weights.len()
    }

    fn full(lo: usize, weights: Vec<f64>) -> Self {
        let core = (0, weights.len());
        Self { lo, weights, core }
    }
}

/// Everything a fit needs, with rows sorted by `t`.
#[derive(Debug, Clone)]
pub struct FitContext {
    spec: LossSpec,
    kernel: KernelConfig,
    cfg: FitConfig,
    /// Rows in t order.
    data: Dataset,
    /// `order[k]` is the original row of sorted row `k`.
    order: Vec<usize>,
    obs: Vec<Count>,
    omega1: Vec<f64>,
    gamma_weights: Vec<f64>,
    lev_x: LeverageWeights,
    windows: Vec<Window>,
}

/// Working estimate in sorted order.
#[derive(Debug, Clone)]
struct State {
    beta: Vec<f64>,
    gamma: Vec<f64>,
    m: Vec<f64>,
    local: Vec<Vec<f64>>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn local_options() -> NewtonOptions {
    NewtonOptions {
        max_iter: 100,
        gtol: 1e-11,
        max_step: 2.0,
    }
}

impl FitContext {
    pub fn new(data: &Dataset, spec: &LossSpec, kernel: &KernelConfig, cfg: &FitConfig) -> Result<Self> {
        cfg.validate()?;
        if data.len() < data.p() + 2 {
            return Err(PlzipError::InsufficientData(format!(
                "{} rows for {} covariates",
                data.len(),
                data.p()
            )));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.sort_by(|&a, &b| data.t[a].total_cmp(&data.t[b]).then(a.cmp(&b)));
        let sorted = data.subset(&order);
        let family = spec.family();
        let (lev_x, omega1, omega2) = if cfg.uses_leverage(family) {
            let lx = build_leverage(&sorted.x, cfg.decay);
            let lz = build_leverage(&sorted.z, cfg.decay);
            let o1 = lx.omega_rows(&sorted.x);
            let o2 = lz.omega_rows(&sorted.z);
            (lx, o1, o2)
        } else {
            (
                LeverageWeights::unit(data.p()),
                vec![1.0; data.len()],
                vec![1.0; data.len()],
            )
        };
        let gamma_weights = if cfg.guards_false_zeros(family) {
            omega2.iter().zip(&omega1).map(|(a, b)| a * b).collect()
        } else {
            omega2
        };
        let obs = sorted.y.iter().map(|&y| Count::new(y)).collect();
        let mut ctx = Self {
            spec: spec.clone(),
            kernel: *kernel,
            cfg: cfg.clone(),
            data: sorted,
            order,
            obs,
            omega1,
            gamma_weights,
            lev_x,
            windows: Vec::new(),
        };
        ctx.windows = (0..ctx.n())
            .map(|k| ctx.window_at(ctx.data.t[k]))
            .collect::<Result<_>>()?;
        Ok(ctx)
    }

    pub fn n(&self) -> usize {
        self.data.len()
    }

    pub fn spec(&self) -> &LossSpec {
        &self.spec
    }

    fn p(&self) -> usize {
        self.data.p()
    }

    fn window_at(&self, tau: f64) -> Result<Window> {
        let t = &self.data.t;
        let reach = self.kernel.reach();
        let lo = t.partition_point(|&v| v < tau - reach);
        let hi = t.partition_point(|&v| v <= tau + reach);
        let mut weights: Vec<f64> = t[lo..hi]
            .iter()
            .map(|&ti| self.kernel.density((tau - ti) / self.kernel.h))
            .collect();
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(PlzipError::DegenerateWindow { tau });
        }
        for w in &mut weights {
            *w /= total;
        }
        let near = SCAN_REACH * self.kernel.h;
        let core_lo = t[lo..hi].partition_point(|&v| v < tau - near);
        let core_hi = t[lo..hi].partition_point(|&v| v <= tau + near);
        Ok(Window {
            lo,
            weights,
            core: (core_lo, core_hi),
        })
    }

    /// `(1 − w_i) ω₁(x_i)` in sorted order.
    fn poisson_weights(&self, w: &[f64]) -> Vec<f64> {
        w.iter().zip(&self.omega1).map(|(w, o)| (1.0 - w) * o).collect()
    }

    fn xb(&self, k: usize, beta: &[f64]) -> f64 {
        self.data.x.dot_row(k, beta)
    }

    fn e_step(&self, s: &State) -> Vec<f64> {
        (0..self.n())
            .map(|k| {
                let zg = self.data.z.dot_row(k, &s.gamma);
                posterior_w(self.data.y[k], zg, self.xb(k, &s.beta) + s.m[k])
            })
            .collect()
    }

    // ---- step 1: local joint fit of (β, η) ----

    fn local_value(&self, win: &Window, a: &[f64], spec: &LossSpec, par: &[f64]) -> f64 {
        let p = self.p();
        let (beta, eta) = (&par[..p], par[p]);
        let mut total = 0.0;
        for (k, wk) in win.range().zip(&win.weights) {
            let wt = wk * a[k];
            if wt > 0.0 {
                total += wt * spec.value(&self.obs[k], self.xb(k, beta) + eta);
            }
        }
        total
    }

    fn local_grad_hess(&self, win: &Window, a: &[f64], spec: &LossSpec, par: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let p = self.p();
        let (beta, eta) = (&par[..p], par[p]);
        let d = p + 1;
        let mut g = DVector::zeros(d);
        let mut h = DMatrix::zeros(d, d);
        let mut v = vec![1.0; d];
        for (k, wk) in win.range().zip(&win.weights) {
            let wt = wk * a[k];
            if wt <= 0.0 {
                continue;
            }
            let (_, psi, dpsi) = spec.eval(&self.obs[k], self.xb(k, beta) + eta);
            v[..p].copy_from_slice(self.data.x.row(k));
            for r in 0..d {
                g[r] += wt * psi * v[r];
                let hr = wt * dpsi * v[r];
                for c in 0..=r {
                    h[(r, c)] += hr * v[c];
                }
            }
        }
        for r in 0..d {
            for c in r + 1..d {
                h[(r, c)] = h[(c, r)];
            }
        }
        (g, h)
    }

    fn local_score_norm(&self, win: &Window, a: &[f64], par: &[f64]) -> f64 {
        self.local_grad_hess(win, a, &self.spec, par).0.norm()
    }

    fn check_window(&self, k: usize, a: &[f64]) -> Result<()> {
        let win = &self.windows[k];
        let tau = self.data.t[k];
        let max_w = win.weights.iter().cloned().fold(0.0, f64::max);
        let effective = win
            .range()
            .zip(&win.weights)
            .filter(|(j, w)| **w * a[*j] > 1e-12 * max_w)
            .count();
        if effective < self.p() + 1 {
            return Err(PlzipError::LocalFit {
                tau,
                reason: format!("{effective} effective observations for {} parameters", self.p() + 1),
            });
        }
        let positive = win.range().any(|j| self.data.y[j] > 0 && a[j] > 0.0);
        if !positive {
            return Err(PlzipError::LocalFit {
                tau,
                reason: "no positive counts in the window".into(),
            });
        }
        Ok(())
    }

    fn newton_local(&self, win: &Window, a: &[f64], spec: &LossSpec, start: &[f64]) -> (Vec<f64>, f64, bool) {
        let out = newton_minimize(
            |x| self.local_value(win, a, spec, x),
            |x| self.local_grad_hess(win, a, spec, x),
            start,
            &local_options(),
        );
        (out.x, out.value, out.converged)
    }

    /// Local fit at sorted row `k`. `warm` is the previous solution for this
    /// τ; `neighbor` that of the preceding τ during the initial sweep.
    fn step1_at(
        &self,
        k: usize,
        a: &[f64],
        warm: &[f64],
        neighbor: Option<&[f64]>,
        multistart: bool,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_window(k, a)?;
        let win = &self.windows[k];
        let ml = LossSpec::ml();
        let fail = |reason: &str| PlzipError::LocalFit {
            tau: self.data.t[k],
            reason: reason.to_string(),
        };
        if self.spec.family() == LossFamily::Ml || !multistart {
            let (x, _, ok) = self.newton_local(win, a, &self.spec, warm);
            if ok {
                return Ok((x.clone(), x));
            }
            let polished = self.polish_local(win, a, warm);
            return polished.map(|x| (x.clone(), x)).ok_or_else(|| fail("Newton iteration did not converge"));
        }
        let (ml_sol, _, ml_ok) = self.newton_local(win, a, &ml, warm);
        let ml_sol = if ml_ok { ml_sol } else { warm.to_vec() };
        let p = self.p();
        let mut starts: Vec<Vec<f64>> = vec![ml_sol.clone()];
        if let Some(nb) = neighbor {
            starts.push(nb.to_vec());
        }
        let offsets: Vec<f64> = win.range().map(|j| self.xb(j, &ml_sol[..p])).collect();
        let eta = self.scan_eta(win, a, &offsets, ml_sol[p]);
        let mut scanned = ml_sol.clone();
        scanned[p] = eta;
        starts.push(scanned);
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(self.cfg.seed ^ self.data.t[k].to_bits()));
        let normal = Normal::new(0.0, 0.5).expect("valid normal");
        for _ in 0..self.cfg.restarts {
            starts.push(ml_sol.iter().map(|v| v + normal.sample(&mut rng)).collect());
        }
        let mut best: Option<(Vec<f64>, f64, bool)> = None;
        for s in &starts {
            let (x, v, ok) = self.newton_local(win, a, &self.spec, s);
            let cand = if ok {
                (x, v, true)
            } else if let Some(px) = self.polish_local(win, a, s) {
                let pv = self.local_value(win, a, &self.spec, &px);
                (px, pv, true)
            } else {
                (x, v, false)
            };
            if !cand.1.is_finite() {
                continue;
            }
            let better = match &best {
                None => true,
                Some((_, bv, bok)) => (cand.2 && !bok) || (cand.2 == *bok && cand.1 < *bv),
            };
            if better {
                best = Some(cand);
            }
        }
        match best {
            Some((x, _, true)) => Ok((ml_sol, x)),
            _ => Err(fail("no start converged")),
        }
    }

    /// Nelder–Mead followed by Newton, for starts where Newton alone stalls.
    fn polish_local(&self, win: &Window, a: &[f64], start: &[f64]) -> Option<Vec<f64>> {
        let (x, _) = nelder_mead(
            |x| self.local_value(win, a, &self.spec, x),
            start,
            0.25,
            200 * (start.len() + 1),
            1e-12,
        );
        let (x, _, ok) = self.newton_local(win, a, &self.spec, &x);
        ok.then_some(x)
    }

    // ---- step 3: scalar η at fixed offsets ----

    fn eta_value(&self, win: &Window, a: &[f64], offsets: &[f64], eta: f64) -> f64 {
        let mut total = 0.0;
        for ((k, wk), off) in win.range().zip(&win.weights).zip(offsets) {
            let wt = wk * a[k];
            if wt > 0.0 {
                total += wt * self.spec.value(&self.obs[k], off + eta);
            }
        }
        total
    }

    fn eta_derivs(&self, win: &Window, a: &[f64], offsets: &[f64], eta: f64) -> (f64, f64, f64) {
        let (mut v, mut d1, mut d2) = (0.0, 0.0, 0.0);
        for ((k, wk), off) in win.range().zip(&win.weights).zip(offsets) {
            let wt = wk * a[k];
            if wt > 0.0 {
                let (r, psi, dpsi) = self.spec.eval(&self.obs[k], off + eta);
                v += wt * r;
                d1 += wt * psi;
                d2 += wt * dpsi;
            }
        }
        (v, d1, d2)
    }

    fn eta_core_value(&self, win: &Window, a: &[f64], offsets: &[f64], eta: f64) -> f64 {
        let (c0, c1) = win.core;
        let mut total = 0.0;
        for i in c0..c1 {
            let k = win.lo + i;
            let wt = win.weights[i] * a[k];
            if wt > 0.0 {
                total += wt * self.spec.value(&self.obs[k], offsets[i] + eta);
            }
        }
        total
    }

    /// Grid scan on `center ± 3` followed by a bracketed polish.
    fn scan_eta(&self, win: &Window, a: &[f64], offsets: &[f64], center: f64) -> f64 {
        let steps = (2.0 * ETA_SCAN_HALF_WIDTH / ETA_SCAN_STEP).round() as usize;
        let lo = center - ETA_SCAN_HALF_WIDTH;
        let grid: Vec<f64> = (0..=steps).map(|i| lo + i as f64 * ETA_SCAN_STEP).collect();
        let values: Vec<f64> = grid.iter().map(|&e| self.eta_core_value(win, a, offsets, e)).collect();
        let mut best = 0;
        for i in 1..grid.len() {
            if values[i] < values[best] {
                best = i;
            }
        }
        let a_lo = grid[best.saturating_sub(1)];
        let a_hi = grid[(best + 1).min(steps)];
        self.polish_eta(win, a, offsets, a_lo, a_hi, grid[best])
    }

    fn polish_eta(&self, win: &Window, a: &[f64], offsets: &[f64], lo: f64, hi: f64, guess: f64) -> f64 {
        let d = |e: f64| self.eta_derivs(win, a, offsets, e).1;
        let (dlo, dhi) = (d(lo), d(hi));
        let x = if dlo < 0.0 && dhi > 0.0 {
            brent_root(d, lo, hi, 1e-15).unwrap_or(guess)
        } else {
            brent_minimize(|e| self.eta_value(win, a, offsets, e), lo, hi, 1e-12).0
        };
        self.newton_eta(win, a, offsets, x).unwrap_or(x)
    }

    /// Safeguarded scalar Newton; `None` where curvature is not positive.
    fn newton_eta(&self, win: &Window, a: &[f64], offsets: &[f64], start: f64) -> Option<f64> {
        let mut eta = start;
        let (mut v, mut d1, mut d2) = self.eta_derivs(win, a, offsets, eta);
        for _ in 0..60 {
            if d1.abs() <= 1e-14 {
                return Some(eta);
            }
            if !(d2 > 0.0) {
                return None;
            }
            let mut step = (-d1 / d2).clamp(-1.0, 1.0);
            let mut accepted = false;
            for _ in 0..40 {
                let cand = eta + step;
                let (cv, c1, c2) = self.eta_derivs(win, a, offsets, cand);
                if cv <= v + 1e-14 * v.abs() || c1.abs() < d1.abs() {
                    eta = cand;
                    (v, d1, d2) = (cv, c1, c2);
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        (d1.abs() <= 1e-10).then_some(eta)
    }

    fn ml_eta(&self, win: &Window, a: &[f64], offsets: &[f64]) -> Option<f64> {
        let (mut num, mut den) = (0.0, 0.0);
        for ((k, wk), off) in win.range().zip(&win.weights).zip(offsets) {
            let wt = wk * a[k];
            num += wt * self.obs[k].y;
            den += wt * off.exp();
        }
        (num > 0.0 && den > 0.0).then(|| (num / den).ln())
    }

    fn step3_at(&self, k: usize, a: &[f64], beta: &[f64], center: f64, scan: bool) -> Result<f64> {
        self.check_window(k, a)?;
        let win = &self.windows[k];
        let offsets: Vec<f64> = win.range().map(|j| self.xb(j, beta)).collect();
        self.solve_eta(win, a, &offsets, center, scan).ok_or_else(|| PlzipError::LocalFit {
            tau: self.data.t[k],
            reason: "η refit failed".into(),
        })
    }

    fn solve_eta(&self, win: &Window, a: &[f64], offsets: &[f64], center: f64, scan: bool) -> Option<f64> {
        if self.spec.family() == LossFamily::Ml {
            return self.ml_eta(win, a, offsets);
        }
        if !scan {
            if let Some(e) = self.newton_eta(win, a, offsets, center) {
                return Some(e);
            }
        }
        let e = self.scan_eta(win, a, offsets, center);
        e.is_finite().then_some(e)
    }

    // ---- step 2 ----

    fn beta_value(&self, spec: &LossSpec, a: &[f64], offsets: &[f64], beta: &[f64]) -> f64 {
        let mut total = 0.0;
        for k in 0..self.n() {
            if a[k] > 0.0 {
                total += a[k] * spec.value(&self.obs[k], self.xb(k, beta) + offsets[k]);
            }
        }
        total / self.n() as f64
    }

    fn beta_grad_hess(&self, spec: &LossSpec, a: &[f64], offsets: &[f64], beta: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let p = self.p();
        let mut g = DVector::zeros(p);
        let mut h = DMatrix::zeros(p, p);
        for k in 0..self.n() {
            if a[k] <= 0.0 {
                continue;
            }
            let (_, psi, dpsi) = spec.eval(&self.obs[k], self.xb(k, beta) + offsets[k]);
            let x = self.data.x.row(k);
            for r in 0..p {
                g[r] += a[k] * psi * x[r];
                for c in 0..=r {
                    h[(r, c)] += a[k] * dpsi * x[r] * x[c];
                }
            }
        }
        for r in 0..p {
            for c in r + 1..p {
                h[(r, c)] = h[(c, r)];
            }
        }
        let n = self.n() as f64;
        (g / n, h / n)
    }

    fn step2_beta(&self, spec: &LossSpec, a: &[f64], offsets: &[f64], starts: &[Vec<f64>]) -> Result<Vec<f64>> {
        if self.p() == 0 {
            return Ok(Vec::new());
        }
        let opts = NewtonOptions {
            max_iter: 200,
            gtol: 1e-11,
            max_step: 2.0,
        };
        let mut best: Option<(Vec<f64>, f64)> = None;
        for s in starts {
            let mut out = newton_minimize(
                |b| self.beta_value(spec, a, offsets, b),
                |b| self.beta_grad_hess(spec, a, offsets, b),
                s,
                &opts,
            );
            if !out.converged {
                let (x, _) = nelder_mead(|b| self.beta_value(spec, a, offsets, b), s, 0.25, 400 * self.p(), 1e-12);
                out = newton_minimize(
                    |b| self.beta_value(spec, a, offsets, b),
                    |b| self.beta_grad_hess(spec, a, offsets, b),
                    &x,
                    &opts,
                );
            }
            if out.converged && best.as_ref().is_none_or(|(_, v)| out.value < *v) {
                best = Some((out.x, out.value));
            }
        }
        best.map(|(b, _)| b)
            .ok_or_else(|| PlzipError::Solver("β step did not converge from any start".into()))
    }

    fn gamma_value(&self, w: &[f64], gamma: &[f64]) -> f64 {
        let mut total = 0.0;
        for k in 0..self.n() {
            let v = self.gamma_weights[k];
            if v > 0.0 {
                let zg = self.data.z.dot_row(k, gamma);
                total += v * (log1p_exp(zg) - w[k] * zg);
            }
        }
        total / self.n() as f64
    }

    fn gamma_grad_hess(&self, w: &[f64], gamma: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let q = self.data.q();
        let mut g = DVector::zeros(q);
        let mut h = DMatrix::zeros(q, q);
        for k in 0..self.n() {
            let v = self.gamma_weights[k];
            if v <= 0.0 {
                continue;
            }
            let z = self.data.z.row(k);
            let pi = logistic(dot(z, gamma));
            for r in 0..q {
                g[r] += v * (pi - w[k]) * z[r];
                for c in 0..q {
                    h[(r, c)] += v * pi * (1.0 - pi) * z[r] * z[c];
                }
            }
        }
        let n = self.n() as f64;
        (g / n, h / n)
    }

    fn step2_gamma(&self, w: &[f64], start: &[f64]) -> Result<Vec<f64>> {
        step_gamma_newton(
            start,
            |g| self.gamma_value(w, g),
            |g| self.gamma_grad_hess(w, g),
            w.iter().zip(&self.gamma_weights).all(|(w, v)| w * v == 0.0),
        )
    }

    // ---- the loop ----

    fn initial_gamma(&self, w0: &[f64], pi0: f64) -> Vec<f64> {
        let q = self.data.q();
        let mut gamma = vec![0.0; q];
        if let Some(j) = self.data.z.intercept_column() {
            gamma[j] = logit(pi0);
        } else if let Ok(g) = self.step2_gamma(w0, &gamma) {
            gamma = g;
        }
        gamma
    }

    fn initialize(&self) -> Result<State> {
        let n = self.n();
        let p = self.p();
        let zero_frac = self.data.zero_fraction();
        let ybar = self.data.y.iter().sum::<u64>() as f64 / n as f64;
        if ybar == 0.0 {
            let mut gamma = vec![0.0; self.data.q()];
            if let Some(j) = self.data.z.intercept_column() {
                gamma[j] = logit(0.95);
            }
            return Ok(State {
                beta: vec![0.0; p],
                gamma,
                m: vec![0.0; n],
                local: vec![vec![0.0; p + 1]; n],
            });
        }
        let pi0 = (zero_frac - (-ybar).exp()).clamp(0.05, 0.95);
        let share = (pi0 / zero_frac).min(1.0);
        let w0: Vec<f64> = self.data.y.iter().map(|&y| if y == 0 { share } else { 0.0 }).collect();
        let gamma = self.initial_gamma(&w0, pi0);
        let a = self.poisson_weights(&w0);

        let ml = LossSpec::ml();
        let global = self.global_ml(&a, &ml)?;
        let robust = self.spec.family().is_robust();
        let mut ml_local: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut local: Vec<Vec<f64>> = Vec::with_capacity(n);
        for k in 0..n {
            let warm = ml_local.last().cloned().unwrap_or_else(|| global.clone());
            let neighbor = local.last().map(|v: &Vec<f64>| v.as_slice());
            let (mls, sol) = self.step1_at(k, &a, &warm, neighbor, robust)?;
            ml_local.push(mls);
            local.push(sol);
        }
        let m_tilde: Vec<f64> = local.iter().map(|v| v[p]).collect();
        let mut starts = vec![coordinate_median(&local, p)];
        if robust {
            starts.push(self.step2_beta(&ml, &a, &m_tilde, &[vec![0.0; p]])?);
        }
        let beta = self.step2_beta(&self.spec, &a, &m_tilde, &starts)?;
        let m = (0..n)
            .map(|k| self.step3_at(k, &a, &beta, m_tilde[k], true))
            .collect::<Result<Vec<_>>>()?;
        Ok(State {
            beta,
            gamma,
            m,
            local,
        })
    }

    /// Global Poisson fit on `(x, 1)`, used as the first warm start.
    fn global_ml(&self, a: &[f64], ml: &LossSpec) -> Result<Vec<f64>> {
        let n = self.n();
        let all = Window::full(0, vec![1.0 / n as f64; n]);
        let ybar: f64 = (0..n).map(|k| a[k] * self.obs[k].y).sum::<f64>() / a.iter().sum::<f64>();
        let mut start = vec![0.0; self.p() + 1];
        start[self.p()] = ybar.max(1e-3).ln();
        let (x, _, ok) = self.newton_local(&all, a, ml, &start);
        if ok {
            Ok(x)
        } else {
            Err(PlzipError::Solver("global Poisson start did not converge".into()))
        }
    }

    /// One E-step plus M-step. `scan` forces the global η scan in step 3.
    fn cycle(&self, s: &State, scan: bool) -> Result<(State, Option<PlzipError>)> {
        let n = self.n();
        let p = self.p();
        let w = self.e_step(s);
        let a = self.poisson_weights(&w);
        let local = (0..n)
            .map(|k| self.step1_at(k, &a, &s.local[k], None, false).map(|r| r.1))
            .collect::<Result<Vec<_>>>()?;
        let m_tilde: Vec<f64> = local.iter().map(|v| v[p]).collect();
        let starts = vec![s.beta.clone(), coordinate_median(&local, p)];
        let beta = self.step2_beta(&self.spec, &a, &m_tilde, &starts)?;
        let (gamma, gamma_err) = match self.step2_gamma(&w, &s.gamma) {
            Ok(g) => (g, None),
            Err(e @ PlzipError::Separation { .. }) => (s.gamma.clone(), Some(e)),
            Err(e) => return Err(e),
        };
        let m = (0..n)
            .map(|k| self.step3_at(k, &a, &beta, s.m[k], scan))
            .collect::<Result<Vec<_>>>()?;
        Ok((
            State {
                beta,
                gamma,
                m,
                local,
            },
            gamma_err,
        ))
    }

    fn objective(&self, s: &State, w: &[f64]) -> f64 {
        let a = self.poisson_weights(w);
        self.beta_value(&self.spec, &a, &s.m, &s.beta) + self.gamma_value(w, &s.gamma)
    }

    fn scores(&self, s: &State, w: &[f64], gamma_separated: bool) -> ScoreBlocks {
        let n = self.n();
        let p = self.p();
        let a = self.poisson_weights(w);
        let mut local: f64 = 0.0;
        let mut refit: f64 = 0.0;
        for k in 0..n {
            let win = &self.windows[k];
            local = local.max(self.local_score_norm(win, &a, &s.local[k]));
            let offsets: Vec<f64> = win.range().map(|j| self.xb(j, &s.beta)).collect();
            refit = refit.max(self.eta_derivs(win, &a, &offsets, s.m[k]).1.abs());
        }
        let m_tilde: Vec<f64> = s.local.iter().map(|v| v[p]).collect();
        let beta = if p == 0 {
            0.0
        } else {
            self.beta_grad_hess(&self.spec, &a, &m_tilde, &s.beta).0.norm()
        };
        let gamma = if gamma_separated {
            0.0
        } else {
            self.gamma_grad_hess(w, &s.gamma).0.norm()
        };
        ScoreBlocks {
            local,
            refit,
            beta,
            gamma,
        }
    }

    fn unsort(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        for (k, &i) in self.order.iter().enumerate() {
            out[i] = v[k];
        }
        out
    }

    fn to_result(&self, s: &State, iterations: usize, converged_params: bool, trace: Vec<f64>, warnings: Vec<String>, gamma_separated: bool) -> FitResult {
        let w = self.e_step(s);
        let scores = self.scores(s, &w, gamma_separated);
        let score_norm = scores.norm();
        let m = self.unsort(&s.m);
        let mut local = vec![Vec::new(); self.n()];
        for (k, &i) in self.order.iter().enumerate() {
            local[i] = s.local[k].clone();
        }
        let t_orig = self.unsort(&self.data.t);
        FitResult {
            theta: ThetaEstimate {
                beta: s.beta.clone(),
                gamma: s.gamma.clone(),
                m_values: t_orig.into_iter().zip(m).collect(),
                h: self.kernel.h,
                loss: self.spec.family(),
                c: self.spec.c(),
            },
            iterations,
            converged: converged_params && score_norm <= self.cfg.tol_score,
            score_norm,
            scores,
            objective_trace: trace,
            w: self.unsort(&w),
            local,
            config: self.cfg.clone(),
            warnings,
        }
    }

    fn state_from(&self, fit: &FitResult) -> State {
        let m = fit.theta.m();
        State {
            beta: fit.theta.beta.clone(),
            gamma: fit.theta.gamma.clone(),
            m: self.order.iter().map(|&i| m[i]).collect(),
            local: self.order.iter().map(|&i| fit.local[i].clone()).collect(),
        }
    }

    pub fn run(&self) -> Result<FitResult> {
        if self.data.y.iter().all(|&y| y == 0) {
            return Err(PlzipError::InsufficientData("no positive counts".into()));
        }
        let mut state = self.initialize()?;
        let mut trace = Vec::new();
        let mut warnings = Vec::new();
        let mut separated = false;
        let mut converged = false;
        let mut iterations = 0;
        let robust = self.spec.family().is_robust();
        while iterations < self.cfg.max_em_iters {
            iterations += 1;
            let (next, gamma_err) = self.cycle(&state, false)?;
            if let Some(e) = gamma_err {
                if !separated {
                    warnings.push(format!("logistic step skipped: {e}"));
                }
                separated = true;
            }
            let change = max_abs_diff(&next.beta, &state.beta)
                .max(max_abs_diff(&next.gamma, &state.gamma))
                .max(max_abs_diff(&next.m, &state.m));
            let w = self.e_step(&next);
            trace.push(self.objective(&next, &w));
            state = next;
            if change < self.cfg.tol_param {
                if robust {
                    let a = self.poisson_weights(&self.e_step(&state));
                    let scanned = (0..self.n())
                        .map(|k| self.step3_at(k, &a, &state.beta, state.m[k], true))
                        .collect::<Result<Vec<_>>>()?;
                    let moved = max_abs_diff(&scanned, &state.m);
                    state.m = scanned;
                    if moved >= self.cfg.tol_param {
                        continue;
                    }
                }
                converged = true;
                break;
            }
        }
        Ok(self.to_result(&state, iterations, converged, trace, warnings, separated))
    }

    /// One further E-step and M-step from a finished fit.
    pub fn refine_once(&self, fit: &FitResult) -> Result<ThetaEstimate> {
        let s = self.state_from(fit);
        let (next, _) = self.cycle(&s, false)?;
        let mut theta = fit.theta.clone();
        theta.beta = next.beta;
        theta.gamma = next.gamma;
        let m = self.unsort(&next.m);
        for (slot, v) in theta.m_values.iter_mut().zip(m) {
            slot.1 = v;
        }
        Ok(theta)
    }
}

fn coordinate_median(local: &[Vec<f64>], p: usize) -> Vec<f64> {
    (0..p)
        .map(|j| median(&local.iter().map(|v| v[j]).collect::<Vec<_>>()))
        .collect()
}

/// Newton's method with step halving for a convex logistic objective.
fn step_gamma_newton<V, G>(start: &[f64], value: V, grad_hess: G, no_events: bool) -> Result<Vec<f64>>
where
    V: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> (DVector<f64>, DMatrix<f64>),
{
    const DRIFT: f64 = 40.0;
    let separation = |g: &[f64]| {
        let norm = norm2(g).max(f64::MIN_POSITIVE);
        PlzipError::Separation {
            direction: g.iter().map(|v| v / norm).collect(),
        }
    };
    let mut gamma = start.to_vec();
    let mut f = value(&gamma);
    for _ in 0..200 {
        let (g, h) = grad_hess(&gamma);
        if g.amax() <= 1e-12 {
            break;
        }
        let step = match h.clone().cholesky() {
            Some(ch) => ch.solve(&(-&g)),
            None => {
                let ridge = h + DMatrix::identity(g.len(), g.len()) * 1e-8;
                match ridge.cholesky() {
                    Some(ch) => ch.solve(&(-&g)),
                    None => return Err(separation(&gamma)),
                }
            }
        };
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let cand: Vec<f64> = gamma.iter().zip(step.iter()).map(|(a, b)| a + t * b).collect();
            let fc = value(&cand);
            if fc <= f {
                moved = fc < f || cand != gamma;
                gamma = cand;
                f = fc;
                break;
            }
            t *= 0.5;
        }
        if gamma.iter().any(|v| v.abs() > DRIFT) {
            return Err(separation(&gamma));
        }
        if !moved {
            break;
        }
    }
    if no_events {
        return Err(separation(&gamma));
    }
    let (g, h) = grad_hess(&gamma);
    // the line search stops once the predicted decrease is lost in the objective's roundoff
    let decrement = h.cholesky().map(|ch| g.dot(&ch.solve(&g))).unwrap_or(f64::INFINITY);
    if g.amax() > 1e-8 && decrement > 1e-12 * f.abs().max(1.0) {
        return Err(PlzipError::Solver(format!("logistic step stalled with gradient {:.3e}", g.amax())));
    }
    Ok(gamma)
}

/// Evaluates a fitted model at new points, re-solving the local η problem.
#[derive(Debug, Clone)]
pub struct Predictor {
    ctx: FitContext,
    a: Vec<f64>,
    beta: Vec<f64>,
    gamma: Vec<f64>,
    /// `(t, m̂)` sorted by t.
    m_sorted: Vec<(f64, f64)>,
}

impl Predictor {
    pub fn new(data: &Dataset, spec: &LossSpec, fit: &FitResult) -> Result<Self> {
        Self::from_parts(data, spec, &fit.theta, &fit.w, &fit.config)
    }

    /// From a stored estimate and its posterior weights on the training rows.
    pub fn from_parts(data: &Dataset, spec: &LossSpec, theta: &ThetaEstimate, w: &[f64], cfg: &FitConfig) -> Result<Self> {
        if w.len() != data.len() || theta.m_values.len() != data.len() {
            return Err(PlzipError::InvalidData("stored fit does not match its training data".into()));
        }
        let kernel = KernelConfig::gaussian(theta.h)?;
        let ctx = FitContext::new(data, spec, &kernel, cfg)?;
        let w: Vec<f64> = ctx.order.iter().map(|&i| w[i]).collect();
        let a = ctx.poisson_weights(&w);
        let mut m_sorted = theta.m_values.clone();
        m_sorted.sort_by(|x, y| x.0.total_cmp(&y.0));
        Ok(Self {
            a,
            beta: theta.beta.clone(),
            gamma: theta.gamma.clone(),
            m_sorted,
            ctx,
        })
    }

    pub fn spec(&self) -> &LossSpec {
        &self.ctx.spec
    }

    pub fn omega1(&self, x: &[f64]) -> f64 {
        self.ctx.lev_x.omega(x)
    }

    /// `(zᵀγ̂, xᵀβ̂ + m)`.
    pub fn predictors(&self, x: &[f64], z: &[f64], m: f64) -> (f64, f64) {
        (dot(z, &self.gamma), dot(x, &self.beta) + m)
    }

    /// Stored `m̂` linearly interpolated in t, flat beyond the ends.
    fn interpolated_m(&self, tau: f64) -> f64 {
        let s = &self.m_sorted;
        let k = s.partition_point(|&(t, _)| t < tau);
        if k == 0 {
            s[0].1
        } else if k == s.len() {
            s[s.len() - 1].1
        } else {
            let (t0, m0) = s[k - 1];
            let (t1, m1) = s[k];
            if t1 == t0 {
                m1
            } else {
                m0 + (m1 - m0) * (tau - t0) / (t1 - t0)
            }
        }
    }

    /// `m̂(τ)` from the η refit with the final `β̂` and weights.
    pub fn predict_m(&self, tau: f64) -> Result<f64> {
        let win = self.ctx.window_at(tau)?;
        let offsets: Vec<f64> = win.range().map(|j| self.ctx.xb(j, &self.beta)).collect();
        let center = self.interpolated_m(tau);
        self.ctx
            .solve_eta(&win, &self.a, &offsets, center, true)
            .ok_or_else(|| PlzipError::LocalFit {
                tau,
                reason: "η refit failed".into(),
            })
    }

    /// `(1 − π̂) λ̂` at a new point.
    pub fn predict_mean(&self, x: &[f64], z: &[f64], tau: f64) -> Result<f64> {
        let m = self.predict_m(tau)?;
        let (zg, log_mean) = self.predictors(x, z, m);
        Ok(zip_mean(zg, log_mean))
    }
}

// ---- public operations on unsorted data ----

/// Fits the model by the EM-type iteration.
pub fn em_fit(data: &Dataset, spec: &LossSpec, kernel: &KernelConfig, cfg: &FitConfig) -> Result<FitResult> {
    FitContext::new(data, spec, kernel, cfg)?.run()
}

/// Starting estimate, before any EM iteration.
pub fn initialize(data: &Dataset, spec: &LossSpec, kernel: &KernelConfig, cfg: &FitConfig) -> Result<ThetaEstimate> {
    let ctx = FitContext::new(data, spec, kernel, cfg)?;
    let s = ctx.initialize()?;
    let m = ctx.unsort(&s.m);
    Ok(ThetaEstimate {
        beta: s.beta,
        gamma: s.gamma,
        m_values: data.t.iter().copied().zip(m).collect(),
        h: kernel.h,
        loss: spec.family(),
        c: spec.c(),
    })
}

/// Posterior weights at `theta`.
pub fn e_step(data: &Dataset, theta: &ThetaEstimate) -> Vec<f64> {
    (0..data.len())
        .map(|i| {
            let (zg, eta) = theta.predictors(data, i);
            posterior_w(data.y[i], zg, eta)
        })
        .collect()
}

/// Standalone local problems on unsorted data, with explicit weights.
#[derive(Debug, Clone)]
pub struct LocalProblem<'a> {
    pub data: &'a Dataset,
    pub w: &'a [f64],
    pub omega1: &'a [f64],
    pub spec: &'a LossSpec,
    pub kernel: KernelConfig,
}

impl LocalProblem<'_> {
    fn window(&self, tau: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let k = crate::smoothing::nw_weights(tau, &self.data.t, &self.kernel)?;
        let a = self.w.iter().zip(self.omega1).map(|(w, o)| (1.0 - w) * o).collect();
        Ok((k, a))
    }

    fn value(&self, k: &[f64], a: &[f64], beta: &[f64], eta: f64) -> f64 {
        (0..self.data.len())
            .filter(|&i| k[i] * a[i] > 0.0)
            .map(|i| k[i] * a[i] * self.spec.value(&Count::new(self.data.y[i]), self.data.x.dot_row(i, beta) + eta))
            .sum()
    }

    fn grad(&self, k: &[f64], a: &[f64], beta: &[f64], eta: f64) -> (Vec<f64>, DMatrix<f64>) {
        let p = self.data.p();
        let mut g = vec![0.0; p + 1];
        let mut h = DMatrix::zeros(p + 1, p + 1);
        for i in 0..self.data.len() {
            let wt = k[i] * a[i];
            if wt <= 0.0 {
                continue;
            }
            let (_, psi, dpsi) = self.spec.eval(&Count::new(self.data.y[i]), self.data.x.dot_row(i, beta) + eta);
            let mut v = self.data.x.row(i).to_vec();
            v.push(1.0);
            for r in 0..=p {
                g[r] += wt * psi * v[r];
                for c in 0..=p {
                    h[(r, c)] += wt * dpsi * v[r] * v[c];
                }
            }
        }
        (g, h)
    }

    /// Local score `Σ W_i (1 − w_i) Ψ_i ω_i (x_i, 1)` at `(β, η)`.
    pub fn local_score(&self, tau: f64, beta: &[f64], eta: f64) -> Result<Vec<f64>> {
        let (k, a) = self.window(tau)?;
        Ok(self.grad(&k, &a, beta, eta).0)
    }

    /// Joint minimizer `(β̃(τ), η̃(τ))` from `start`.
    pub fn step1_local(&self, tau: f64, start: &[f64]) -> Result<(Vec<f64>, f64)> {
        let (k, a) = self.window(tau)?;
        let p = self.data.p();
        let out = newton_minimize(
            |x| self.value(&k, &a, &x[..p], x[p]),
            |x| {
                let (g, h) = self.grad(&k, &a, &x[..p], x[p]);
                (DVector::from_vec(g), h)
            },
            start,
            &local_options(),
        );
        if !out.converged {
            return Err(PlzipError::LocalFit {
                tau,
                reason: "Newton iteration did not converge".into(),
            });
        }
        Ok((out.x[..p].to_vec(), out.x[p]))
    }

    /// `argmin_η` at fixed β: closed form for ML, scan and polish otherwise.
    pub fn step3_m(&self, tau: f64, beta: &[f64], center: f64) -> Result<f64> {
        let (k, a) = self.window(tau)?;
        let offsets: Vec<f64> = (0..self.data.len()).map(|i| self.data.x.dot_row(i, beta)).collect();
        let ctx = FitContext {
            spec: self.spec.clone(),
            kernel: self.kernel,
            cfg: FitConfig::default(),
            data: self.data.clone(),
            order: (0..self.data.len()).collect(),
            obs: self.data.y.iter().map(|&y| Count::new(y)).collect(),
            omega1: self.omega1.to_vec(),
            gamma_weights: vec![1.0; self.data.len()],
            lev_x: LeverageWeights::unit(self.data.p()),
            windows: Vec::new(),
        };
        let win = Window::full(0, k);
        ctx.solve_eta(&win, &a, &offsets, center, true)
            .ok_or_else(|| PlzipError::LocalFit {
                tau,
                reason: "η refit failed".into(),
            })
    }

    /// `Σ W_i (1 − w_i) Ψ(y_i, x_iᵀβ + η) ω_i`.
    pub fn eta_score(&self, tau: f64, beta: &[f64], eta: f64) -> Result<f64> {
        let (k, a) = self.window(tau)?;
        Ok(self.grad(&k, &a, beta, eta).0[self.data.p()])
    }
}

/// `argmin_β (1/n) Σ (1 − w_i) ρ(y_i, x_iᵀβ + m_i) ω_i`.
pub fn step2_beta(data: &Dataset, m: &[f64], w: &[f64], omega1: &[f64], spec: &LossSpec, starts: &[Vec<f64>]) -> Result<Vec<f64>> {
    let ctx = plain_context(data, spec, omega1, &vec![1.0; data.len()]);
    let a: Vec<f64> = w.iter().zip(omega1).map(|(w, o)| (1.0 - w) * o).collect();
    ctx.step2_beta(spec, &a, m, starts)
}

/// `(1/n) Σ (1 − w_i) Ψ(y_i, x_iᵀβ + m_i) ω_i x_i`.
pub fn beta_score(data: &Dataset, m: &[f64], w: &[f64], omega1: &[f64], spec: &LossSpec, beta: &[f64]) -> Vec<f64> {
    let ctx = plain_context(data, spec, omega1, &vec![1.0; data.len()]);
    let a: Vec<f64> = w.iter().zip(omega1).map(|(w, o)| (1.0 - w) * o).collect();
    ctx.beta_grad_hess(spec, &a, m, beta).0.as_slice().to_vec()
}

/// Weighted logistic fit of the fractional responses `w` with weights `omega2`.
pub fn step2_gamma(data: &Dataset, w: &[f64], omega2: &[f64]) -> Result<Vec<f64>> {
    let ctx = plain_context(data, &LossSpec::ml(), &vec![1.0; data.len()], omega2);
    ctx.step2_gamma(w, &vec![0.0; data.q()])
}

/// `(1/n) Σ ω_i (π_i − w_i) z_i`.
pub fn gamma_score(data: &Dataset, w: &[f64], omega2: &[f64], gamma: &[f64]) -> Vec<f64> {
    let ctx = plain_context(data, &LossSpec::ml(), &vec![1.0; data.len()], omega2);
    ctx.gamma_grad_hess(w, gamma).0.as_slice().to_vec()
}

fn plain_context(data: &Dataset, spec: &LossSpec, omega1: &[f64], gamma_weights: &[f64]) -> FitContext {
    FitContext {
        spec: spec.clone(),
        kernel: KernelConfig { kind: Default::default(), h: 1.0 },
        cfg: FitConfig::default(),
        data: data.clone(),
        order: (0..data.len()).collect(),
        obs: data.y.iter().map(|&y| Count::new(y)).collect(),
        omega1: omega1.to_vec(),
        gamma_weights: gamma_weights.to_vec(),
        lev_x: LeverageWeights::unit(data.p()),
        windows: Vec::new(),
    }
}

/// Leverage weights `(ω₁ on x, ω₂ on z)` as a fit would use them.
pub fn leverage_weights(data: &Dataset, family: LossFamily, cfg: &FitConfig) -> (Vec<f64>, Vec<f64>) {
    if !cfg.uses_leverage(family) {
        return (vec![1.0; data.len()], vec![1.0; data.len()]);
    }
    let o1 = build_leverage(&data.x, cfg.decay).omega_rows(&data.x);
    let o2 = build_leverage(&data.z, cfg.decay).omega_rows(&data.z);
    let g = if cfg.guards_false_zeros(family) {
        o2.iter().zip(&o1).map(|(a, b)| a * b).collect()
    } else {
        o2
    };
    (o1, g)
}
