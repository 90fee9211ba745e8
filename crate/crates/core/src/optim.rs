//! Small dense optimizers used by the estimation steps.
//!
//! Brent's methods cover the scalar problems (η at fixed β, the MT centering
//! function), Nelder–Mead gives a derivative-free polish for multistart
//! candidates, and a damped Newton iteration finishes every vector problem
//! on the analytic score.

use nalgebra::{DMatrix, DVector};

/// Brent minimization on `[a, b]`. Returns `(x, f(x))`.
pub fn brent_minimize<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, tol: f64) -> (f64, f64) {
    const GOLD: f64 = 0.381_966_011_250_105_1;
    let (mut a, mut b) = if a < b { (a, b) } else { (b, a) };
    let mut x = a + GOLD * (b - a);
    let mut w = x;
    let mut v = x;
    let mut fx = f(x);
    let mut fw = fx;
    let mut fv = fx;
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        let tol1 = tol * x.abs() + 1e-14;
        let tol2 = 2.0 * tol1;
        if (x - m).abs() <= tol2 - 0.5 * (b - a) {
            break;
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            } else {
                q = -q;
            }
            if p.abs() < (0.5 * q * e).abs() && p > q * (a - x) && p < q * (b - x) {
                e = d;
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if x < m { tol1 } else { -tol1 };
                }
                golden = false;
            }
        }
        if golden {
            e = if x < m { b - x } else { a - x };
            d = GOLD * e;
        }
        let u = if d.abs() >= tol1 {
            x + d
        } else if d > 0.0 {
            x + tol1
        } else {
            x - tol1
        };
        let fu = f(u);
        if fu <= fx {
            if u < x {
                b = x;
            } else {
                a = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    (x, fx)
}

/// Brent root finding on a sign-changing bracket. Returns `None` if
/// `f(a)` and `f(b)` share a strict sign.
pub fn brent_root<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, tol: f64) -> Option<f64> {
    let (mut a, mut b) = (a, b);
    let mut fa = f(a);
    let mut fb = f(b);
    if fa == 0.0 {
        return Some(a);
    }
    if fb == 0.0 {
        return Some(b);
    }
    if fa.signum() == fb.signum() {
        return None;
    }
    let mut c = a;
    let mut fc = fa;
    let mut d = b - a;
    let mut e = d;
    for _ in 0..200 {
        if fb.signum() == fc.signum() {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let tol1 = 2.0 * f64::EPSILON * b.abs() + 0.5 * tol;
        let xm = 0.5 * (c - b);
        if xm.abs() <= tol1 || fb == 0.0 {
            return Some(b);
        }
        if e.abs() >= tol1 && fa.abs() > fb.abs() {
            let s = fb / fa;
            let (mut p, mut q);
            if a == c {
                p = 2.0 * xm * s;
                q = 1.0 - s;
            } else {
                let qq = fa / fc;
                let r = fb / fc;
                p = s * (2.0 * xm * qq * (qq - r) - (b - a) * (r - 1.0));
                q = (qq - 1.0) * (r - 1.0) * (s - 1.0);
            }
            if p > 0.0 {
                q = -q;
            }
            p = p.abs();
            let min1 = 3.0 * xm * q - (tol1 * q).abs();
            let min2 = (e * q).abs();
            if 2.0 * p < min1.min(min2) {
                e = d;
                d = p / q;
            } else {
                d = xm;
                e = d;
            }
        } else {
            d = xm;
            e = d;
        }
        a = b;
        fa = fb;
        b += if d.abs() > tol1 {
            d
        } else if xm > 0.0 {
            tol1
        } else {
            -tol1
        };
        fb = f(b);
    }
    Some(b)
}

/// Nelder–Mead simplex search with a fixed evaluation budget.
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x0: &[f64],
    step: f64,
    max_evals: usize,
    ftol: f64,
) -> (Vec<f64>, f64) {
    let dim = x0.len();
    if dim == 0 {
        let v = f(x0);
        return (Vec::new(), v);
    }
    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(dim + 1);
    simplex.push(x0.to_vec());
    for k in 0..dim {
        let mut p = x0.to_vec();
        p[k] += step;
        simplex.push(p);
    }
    let mut fvals: Vec<f64> = simplex.iter().map(|p| f(p)).collect();
    let mut evals = dim + 1;
    while evals < max_evals {
        let mut order: Vec<usize> = (0..=dim).collect();
        order.sort_by(|&i, &j| fvals[i].total_cmp(&fvals[j]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        fvals = order.iter().map(|&i| fvals[i]).collect();
        if (fvals[dim] - fvals[0]).abs() <= ftol * (1.0 + fvals[0].abs()) {
            break;
        }
        let centroid: Vec<f64> = (0..dim)
            .map(|k| simplex[..dim].iter().map(|p| p[k]).sum::<f64>() / dim as f64)
            .collect();
        let along = |coef: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[dim])
                .map(|(c, w)| c + coef * (w - c))
                .collect()
        };
        let xr = along(-1.0);
        let fr = f(&xr);
        evals += 1;
        if fr < fvals[0] {
            let xe = along(-2.0);
            let fe = f(&xe);
            evals += 1;
            if fe < fr {
                simplex[dim] = xe;
                fvals[dim] = fe;
            } else {
                simplex[dim] = xr;
                fvals[dim] = fr;
            }
        } else if fr < fvals[dim - 1] {
            simplex[dim] = xr;
            fvals[dim] = fr;
        } else {
            let (xc, fc) = if fr < fvals[dim] {
                let xc = along(-0.5);
                let fc = f(&xc);
                (xc, fc)
            } else {
                let xc = along(0.5);
                let fc = f(&xc);
                (xc, fc)
            };
            evals += 1;
            if fc < fvals[dim].min(fr) {
                simplex[dim] = xc;
                fvals[dim] = fc;
            } else {
                for i in 1..=dim {
                    let shrunk: Vec<f64> = simplex[0]
                        .iter()
                        .zip(&simplex[i])
                        .map(|(b, p)| b + 0.5 * (p - b))
                        .collect();
                    fvals[i] = f(&shrunk);
                    simplex[i] = shrunk;
                }
                evals += dim;
            }
        }
    }
    let best = (0..=dim)
        .min_by(|&i, &j| fvals[i].total_cmp(&fvals[j]))
        .unwrap_or(0);
    (simplex[best].clone(), fvals[best])
}

#[derive(Debug, Clone)]
pub struct NewtonOptions {
    pub max_iter: usize,
    /// Convergence threshold on the max-norm of the gradient.
    pub gtol: f64,
    /// Largest allowed max-norm of a single step.
    pub max_step: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            gtol: 1e-10,
            max_step: 2.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NewtonOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Damped Newton minimization.
///
/// The Hessian is regularized Levenberg-style until it is positive definite,
/// and steps are accepted by Armijo backtracking on `value`. Close to the
/// solution, where the objective is flat to rounding, a full step is also
/// accepted whenever it shrinks the gradient.
pub fn newton_minimize<V, G>(
    mut value: V,
    mut grad_hess: G,
    x0: &[f64],
    opts: &NewtonOptions,
) -> NewtonOutcome
where
    V: FnMut(&[f64]) -> f64,
    G: FnMut(&[f64]) -> (DVector<f64>, DMatrix<f64>),
{
    let dim = x0.len();
    let mut x = DVector::from_column_slice(x0);
    let mut fx = value(x.as_slice());
    if dim == 0 {
        return NewtonOutcome {
            x: Vec::new(),
            value: fx,
            grad_norm: 0.0,
            iterations: 0,
            converged: true,
        };
    }
    let (mut g, mut h) = grad_hess(x.as_slice());
    let mut gnorm = g.amax();
    let mut iterations = 0;
    let mut mu = 0.0_f64;
    while iterations < opts.max_iter {
        if !gnorm.is_finite() || !fx.is_finite() {
            break;
        }
        if gnorm <= opts.gtol {
            return NewtonOutcome {
                x: x.as_slice().to_vec(),
                value: fx,
                grad_norm: gnorm,
                iterations,
                converged: true,
            };
        }
        iterations += 1;
        let scale = h.diagonal().amax().max(1e-12);
        let mut step = None;
        for _ in 0..60 {
            let mut reg = h.clone();
            for k in 0..dim {
                reg[(k, k)] += mu;
            }
            if let Some(chol) = reg.cholesky() {
                step = Some(-chol.solve(&g));
                break;
            }
            mu = if mu == 0.0 { 1e-8 * scale } else { 4.0 * mu };
        }
        let Some(mut d) = step else { break };
        let dmax = d.amax();
        if dmax > opts.max_step {
            d *= opts.max_step / dmax;
        }
        let slope = g.dot(&d);
        // Below this predicted decrease the objective cannot resolve the
        // step, so only the gradient can judge it.
        let flat = -slope <= 1e-12 * (fx.abs() + f64::MIN_POSITIVE);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            if flat {
                break;
            }
            let xn = &x + &d * t;
            if xn == x {
                break;
            }
            let fnew = value(xn.as_slice());
            if fnew.is_finite() && fnew <= fx + 1e-4 * t * slope {
                x = xn;
                fx = fnew;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            let xn = &x + &d;
            let (gn, hn) = grad_hess(xn.as_slice());
            if gn.amax() < gnorm {
                x = xn;
                fx = value(x.as_slice());
                g = gn;
                h = hn;
                gnorm = g.amax();
                continue;
            }
            if mu < 1e12 * scale {
                mu = if mu == 0.0 { 1e-4 * scale } else { 10.0 * mu };
                continue;
            }
            break;
        }
        mu *= 0.25;
        if mu < 1e-14 * scale {
            mu = 0.0;
        }
        let (gn, hn) = grad_hess(x.as_slice());
        g = gn;
        h = hn;
        gnorm = g.amax();
    }
    NewtonOutcome {
        converged: gnorm <= opts.gtol,
        x: x.as_slice().to_vec(),
        value: fx,
        grad_norm: gnorm,
        iterations,
    }
}
