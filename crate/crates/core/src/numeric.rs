//! Scalar helpers: stable exponentials, Poisson weights, quadrature and
//! cubic Hermite tables on uniform grids.

use statrs::function::factorial::ln_factorial;

/// `log(1 + e^x)` without overflow.
#[inline]
pub fn log1p_exp(x: f64) -> f64 {
    if x > 35.0 {
        x
    } else if x < -35.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// `log(e^a + e^b)`.
#[inline]
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if hi == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// Logistic function, evaluated on the branch that cannot overflow.
#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `y ln y` with the convention `0 ln 0 = 0`.
#[inline]
pub fn x_ln_x(y: f64) -> f64 {
    if y > 0.0 {
        y * y.ln()
    } else {
        0.0
    }
}

#[inline]
pub fn ln_poisson_pmf(j: u64, lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return if j == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    j as f64 * lambda.ln() - lambda - ln_factorial(j)
}

#[inline]
pub fn poisson_pmf(j: u64, lambda: f64) -> f64 {
    ln_poisson_pmf(j, lambda).exp()
}

/// Index range `[lo, hi]` carrying all but a negligible tail of the Poisson(λ)
/// mass: mean ± (10 sd + 20).
pub fn poisson_window(lambda: f64) -> (u64, u64) {
    let spread = 10.0 * lambda.max(0.0).sqrt() + 20.0;
    let lo = (lambda - spread).floor().max(0.0) as u64;
    let hi = (lambda + spread).ceil() as u64;
    (lo, hi)
}

/// Adaptive Simpson quadrature of `f` over `[a, b]` to absolute tolerance `tol`.
pub fn adaptive_simpson<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_step(&mut f, a, b, fa, fm, fb, whole, tol, 50)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step<F: FnMut(f64) -> f64>(
    f: &mut F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
        + simpson_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}

/// Piecewise cubic Hermite interpolant on a uniform grid `x0 + k dx`.
#[derive(Debug, Clone)]
pub struct UniformHermite {
    x0: f64,
    dx: f64,
    values: Vec<f64>,
    slopes: Vec<f64>,
}

impl UniformHermite {
    /// Interpolant with caller-supplied knot derivatives.
    pub fn with_slopes(x0: f64, dx: f64, values: Vec<f64>, slopes: Vec<f64>) -> Self {
        assert!(values.len() >= 2 && values.len() == slopes.len());
        Self {
            x0,
            dx,
            values,
            slopes,
        }
    }

    /// Monotone interpolant: centered-difference knot slopes, limited with the
    /// Fritsch–Carlson rule so monotone data give a monotone curve.
    pub fn monotone(x0: f64, dx: f64, values: Vec<f64>) -> Self {
        let n = values.len();
        assert!(n >= 2);
        let secant: Vec<f64> = values.windows(2).map(|w| (w[1] - w[0]) / dx).collect();
        let mut slopes = vec![0.0; n];
        slopes[0] = secant[0];
        slopes[n - 1] = secant[n - 2];
        for k in 1..n - 1 {
            slopes[k] = (values[k + 1] - values[k - 1]) / (2.0 * dx);
        }
        for k in 0..n - 1 {
            let d = secant[k];
            if d == 0.0 {
                slopes[k] = 0.0;
                slopes[k + 1] = 0.0;
                continue;
            }
            let a = slopes[k] / d;
            let b = slopes[k + 1] / d;
            if a < 0.0 {
                slopes[k] = 0.0;
            }
            if b < 0.0 {
                slopes[k + 1] = 0.0;
            }
            let r = a * a + b * b;
            if r > 9.0 {
                let tau = 3.0 / r.sqrt();
                slopes[k] = tau * a * d;
                slopes[k + 1] = tau * b * d;
            }
        }
        Self {
            x0,
            dx,
            values,
            slopes,
        }
    }

    pub fn x_min(&self) -> f64 {
        self.x0
    }

    pub fn x_max(&self) -> f64 {
        self.x0 + self.dx * (self.values.len() - 1) as f64
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn knots(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.values
            .iter()
            .enumerate()
            .map(move |(k, &v)| (self.x0 + k as f64 * self.dx, v))
    }

    #[inline]
    pub fn contains(&self, x: f64) -> bool {
        x >= self.x_min() && x <= self.x_max()
    }

    #[inline]
    fn locate(&self, x: f64) -> (usize, f64) {
        let pos = (x - self.x0) / self.dx;
        let last = self.values.len() - 2;
        let k = (pos.floor().max(0.0) as usize).min(last);
        (k, pos - k as f64)
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        let (k, s) = self.locate(x);
        let (v0, v1) = (self.values[k], self.values[k + 1]);
        let (m0, m1) = (self.slopes[k] * self.dx, self.slopes[k + 1] * self.dx);
        let s2 = s * s;
        let s3 = s2 * s;
        (2.0 * s3 - 3.0 * s2 + 1.0) * v0
            + (s3 - 2.0 * s2 + s) * m0
            + (-2.0 * s3 + 3.0 * s2) * v1
            + (s3 - s2) * m1
    }

    /// Value, first and second derivative.
    #[inline]
    pub fn eval2(&self, x: f64) -> (f64, f64, f64) {
        let (k, s) = self.locate(x);
        let (v0, v1) = (self.values[k], self.values[k + 1]);
        let (m0, m1) = (self.slopes[k] * self.dx, self.slopes[k + 1] * self.dx);
        let s2 = s * s;
        let s3 = s2 * s;
        let v = (2.0 * s3 - 3.0 * s2 + 1.0) * v0
            + (s3 - 2.0 * s2 + s) * m0
            + (-2.0 * s3 + 3.0 * s2) * v1
            + (s3 - s2) * m1;
        let d1 = ((6.0 * s2 - 6.0 * s) * (v0 - v1)
            + (3.0 * s2 - 4.0 * s + 1.0) * m0
            + (3.0 * s2 - 2.0 * s) * m1)
            / self.dx;
        let d2 = ((12.0 * s - 6.0) * (v0 - v1) + (6.0 * s - 4.0) * m0 + (6.0 * s - 2.0) * m1)
            / (self.dx * self.dx);
        (v, d1, d2)
    }
}

/// Antiderivative of a piecewise-linear function sampled on a uniform grid.
///
/// Holds samples `q_k = q(x0 + k dx)` and evaluates `Q(x) = ∫_{x0}^{x} q`
/// exactly for the linear interpolant, so `Q' = q` holds to rounding.
#[derive(Debug, Clone)]
pub struct LinearAntiderivative {
    x0: f64,
    dx: f64,
    inv_dx: f64,
    x1: f64,
    samples: Vec<f64>,
    cumulative: Vec<f64>,
}

impl LinearAntiderivative {
    pub fn new(x0: f64, dx: f64, samples: Vec<f64>) -> Self {
        assert!(samples.len() >= 2);
        let mut cumulative = Vec::with_capacity(samples.len());
        cumulative.push(0.0);
        for k in 1..samples.len() {
            let prev = cumulative[k - 1];
            cumulative.push(prev + 0.5 * dx * (samples[k - 1] + samples[k]));
        }
        let x1 = x0 + dx * (samples.len() - 1) as f64;
        Self {
            x0,
            dx,
            inv_dx: 1.0 / dx,
            x1,
            samples,
            cumulative,
        }
    }

    /// Shifts the antiderivative so that `Q(x) = 0`.
    pub fn pin_zero_at(&mut self, x: f64) {
        let offset = self.eval(x).0;
        for c in &mut self.cumulative {
            *c -= offset;
        }
    }

    pub fn x_min(&self) -> f64 {
        self.x0
    }

    pub fn x_max(&self) -> f64 {
        self.x1
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    #[inline]
    pub fn contains(&self, x: f64) -> bool {
        x >= self.x0 && x <= self.x1
    }

    /// `(Q(x), q(x), q'(x))`.
    #[inline]
    pub fn eval(&self, x: f64) -> (f64, f64, f64) {
        let pos = (x - self.x0) * self.inv_dx;
        let last = self.samples.len() - 2;
        let k = (pos.floor().max(0.0) as usize).min(last);
        let s = pos - k as f64;
        let (q0, q1) = (self.samples[k], self.samples[k + 1]);
        let slope = (q1 - q0) * self.inv_dx;
        let value = self.cumulative[k] + self.dx * s * (q0 + 0.5 * (q1 - q0) * s);
        (value, q0 + (q1 - q0) * s, slope)
    }

    pub fn knots(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.cumulative
            .iter()
            .enumerate()
            .map(move |(k, &v)| (self.x0 + k as f64 * self.dx, v))
    }
}

/// Median of a slice (average of the two middle values for even lengths).
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Raw median absolute deviation about the median.
pub fn mad(values: &[f64]) -> f64 {
    let med = median(values);
    let dev: Vec<f64> = values.iter().map(|v| (v - med).abs()).collect();
    median(&dev)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stable_logs() {
        assert!((log1p_exp(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(log1p_exp(800.0), 800.0);
        assert!((log_add_exp(0.0, -1.0) - (1.0 + (-1f64).exp()).ln()).abs() < 1e-15);
        assert_eq!(logistic(1000.0), 1.0);
        assert_eq!(logistic(-1000.0), 0.0);
    }

    #[test]
    fn simpson_integrates_smooth_and_kinked() {
        let v = adaptive_simpson(|x| x.sin(), 0.0, std::f64::consts::PI, 1e-12);
        assert!((v - 2.0).abs() < 1e-10);
        let v = adaptive_simpson(|x: f64| (x - 0.3).abs(), 0.0, 1.0, 1e-12);
        assert!((v - (0.045 + 0.245)).abs() < 1e-10);
    }

    #[test]
    fn hermite_reproduces_cubics_with_exact_slopes() {
        let f = |x: f64| x * x * x - 2.0 * x;
        let df = |x: f64| 3.0 * x * x - 2.0;
        let xs: Vec<f64> = (0..11).map(|k| -1.0 + 0.2 * k as f64).collect();
        let t = UniformHermite::with_slopes(
            -1.0,
            0.2,
            xs.iter().map(|&x| f(x)).collect(),
            xs.iter().map(|&x| df(x)).collect(),
        );
        for x in [-0.93, -0.1, 0.37, 0.999] {
            let (v, d1, d2) = t.eval2(x);
            assert!((v - f(x)).abs() < 1e-12);
            assert!((d1 - df(x)).abs() < 1e-11);
            assert!((d2 - 6.0 * x).abs() < 1e-9);
        }
    }

    #[test]
    fn monotone_table_stays_monotone() {
        let vals = vec![0.0, 0.0, 0.1, 5.0, 5.01, 5.02, 9.0];
        let t = UniformHermite::monotone(0.0, 1.0, vals);
        let mut prev = f64::NEG_INFINITY;
        for k in 0..=600 {
            let v = t.eval(k as f64 / 100.0);
            assert!(v >= prev - 1e-12);
            prev = v;
        }
    }

    #[test]
    fn linear_antiderivative_is_exact_for_linear_data() {
        let q = |x: f64| 2.0 * x - 1.0;
        let samples: Vec<f64> = (0..21).map(|k| q(k as f64 * 0.1)).collect();
        let mut t = LinearAntiderivative::new(0.0, 0.1, samples);
        t.pin_zero_at(0.5);
        for x in [0.0, 0.33, 1.0, 1.77, 2.0] {
            let (v, d, dd) = t.eval(x);
            assert!((v - (x * x - x - (0.25 - 0.5))).abs() < 1e-13);
            assert!((d - q(x)).abs() < 1e-13);
            assert!((dd - 2.0).abs() < 1e-10);
        }
    }

    #[test]
    fn poisson_pmf_sums_to_one() {
        for lambda in [0.01, 1.0, 37.5, 2000.0] {
            let (lo, hi) = poisson_window(lambda);
            let total: f64 = (lo..=hi).map(|j| poisson_pmf(j, lambda)).sum();
            assert!((total - 1.0).abs() < 1e-12, "{lambda}: {total}");
        }
    }

    #[test]
    fn median_and_mad() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(mad(&[1.0, 2.0, 3.0, 4.0, 100.0]), 1.0);
    }
}
