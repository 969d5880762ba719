//! Small numerical kernels: Gauss–Legendre rules, adaptive quadrature,
//! root bracketing, monotone interpolation and least squares.

use serde::{Deserialize, Serialize};

/// A value with a one-sigma (or certified, where documented) error bar.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub error: f64,
}

impl Estimate {
    pub fn new(value: f64, error: f64) -> Self {
        Self { value, error }
    }

    pub fn exact(value: f64) -> Self {
        Self { value, error: 0.0 }
    }
}

/// Gauss–Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    if n == 1 {
        return (vec![0.0], vec![2.0]);
    }
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = (n + 1) / 2;
    for i in 0..m {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    (x, w)
}

/// Composite Gauss–Legendre rule on `[a, b]` with `panels` panels of
/// `order` nodes each. Returns (nodes, weights, panel index of each node).
pub fn composite_rule(a: f64, b: f64, panels: usize, order: usize) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    let (gx, gw) = gauss_legendre(order);
    let h = (b - a) / panels as f64;
    let mut xs = Vec::with_capacity(panels * order);
    let mut ws = Vec::with_capacity(panels * order);
    let mut ps = Vec::with_capacity(panels * order);
    for p in 0..panels {
        let lo = a + p as f64 * h;
        for (x, w) in gx.iter().zip(&gw) {
            xs.push(lo + 0.5 * h * (x + 1.0));
            ws.push(0.5 * h * w);
            ps.push(p);
        }
    }
    (xs, ws, ps)
}

/// Integral of `f` on `[a, b]` with a fixed Gauss–Legendre rule.
pub fn integrate_gl<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
    let (x, w) = gauss_legendre(n);
    let (c, h) = (0.5 * (a + b), 0.5 * (b - a));
    x.iter().zip(&w).map(|(xi, wi)| wi * f(c + h * xi)).sum::<f64>() * h
}

const GK_X: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const GK_WK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const GK_WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = GK_WK[7] * fc;
    let mut g = GK_WG[3] * fc;
    for j in 0..7 {
        let dx = h * GK_X[j];
        let s = f(c - dx) + f(c + dx);
        k += GK_WK[j] * s;
        if j % 2 == 1 {
            g += GK_WG[j / 2] * s;
        }
    }
    (k * h, ((k - g) * h).abs())
}

/// Adaptive Gauss–Kronrod (7/15) integration on a finite interval.
/// Returns the integral and an error estimate.
pub fn integrate_adaptive<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, abs_tol: f64, rel_tol: f64) -> (f64, f64) {
    if a == b {
        return (0.0, 0.0);
    }
    let mut stack = vec![(a, b, gk15(&f, a, b))];
    let mut total = 0.0;
    let mut err = 0.0;
    let mut evaluations = 0usize;
    let whole = stack[0].2 .0.abs();
    while let Some((lo, hi, (v, e))) = stack.pop() {
        evaluations += 1;
        let local_tol = (abs_tol.max(rel_tol * whole)) * (hi - lo) / (b - a);
        if e <= local_tol || evaluations > 200_000 || (hi - lo).abs() < 1e-14 * (b - a).abs() {
            total += v;
            err += e;
            continue;
        }
        let mid = 0.5 * (lo + hi);
        stack.push((lo, mid, gk15(&f, lo, mid)));
        stack.push((mid, hi, gk15(&f, mid, hi)));
    }
    (total, err)
}

/// Integral of `f` on `[a, ∞)` through the substitution `x = a + t/(1-t)`.
pub fn integrate_to_infinity<F: Fn(f64) -> f64>(f: F, a: f64, abs_tol: f64, rel_tol: f64) -> (f64, f64) {
    let g = |t: f64| {
        if t >= 1.0 {
            return 0.0;
        }
        let u = 1.0 - t;
        f(a + t / u) / (u * u)
    };
    integrate_adaptive(g, 0.0, 1.0, abs_tol, rel_tol)
}

/// `∫_a^∞ r^k / (1 + r^s) dr` for `s > k + 1`: quadrature on `[a, R]`, then
/// the alternating expansion in `r^{-s}` on `[R, ∞)` with `R = max(a, 2)`,
/// which converges geometrically. The substitution of [`integrate_to_infinity`]
/// leaves an endpoint singularity when `s < k + 2`.
pub fn power_tail_integral(a: f64, k: f64, s: f64) -> f64 {
    let a = a.max(0.0);
    let r = a.max(2.0);
    let near = if a < r { integrate_adaptive(|x| x.powf(k) / (1.0 + x.powf(s)), a, r, 1e-15, 1e-13).0 } else { 0.0 };
    let mut far = 0.0;
    for j in 0..400 {
        let e = s * (j + 1) as f64 - k - 1.0;
        let term = r.powf(-e) / e;
        far += if j % 2 == 0 { term } else { -term };
        if term < 1e-17 * far.abs() {
            break;
        }
    }
    near + far
}

/// Bisection for a monotone predicate: returns the largest `x` in `[lo, hi]`
/// (to tolerance) with `pred(x) == true`, assuming `pred(lo)` holds.
pub fn bisect_last_true<P: Fn(f64) -> bool>(pred: P, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    if pred(hi) {
        return hi;
    }
    while hi - lo > tol * (1.0 + lo.abs()) {
        let mid = 0.5 * (lo + hi);
        if pred(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Root of a nondecreasing function by bisection on a bracket with
/// `f(lo) <= 0 <= f(hi)`.
pub fn bisect_root<F: FnMut(f64) -> f64>(mut f: F, mut lo: f64, mut hi: f64, tol: f64, max_iter: usize) -> f64 {
    for _ in 0..max_iter {
        let mid = 0.5 * (lo + hi);
        if hi - lo <= tol {
            return mid;
        }
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn pos(x: f64) -> f64 {
    x.max(0.0)
}

pub fn neg(x: f64) -> f64 {
    (-x).max(0.0)
}

/// Monotone piecewise-cubic Hermite interpolant (Fritsch–Carlson).
#[derive(Debug, Clone)]
pub struct Pchip {
    x: Vec<f64>,
    y: Vec<f64>,
    m: Vec<f64>,
}

impl Pchip {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Option<Self> {
        let n = x.len();
        if n < 2 || y.len() != n || x.windows(2).any(|w| w[1] <= w[0]) {
            return None;
        }
        let d: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / (x[i + 1] - x[i])).collect();
        let mut m = vec![0.0; n];
        m[0] = d[0];
        m[n - 1] = d[n - 2];
        for i in 1..n - 1 {
            if d[i - 1] * d[i] <= 0.0 {
                m[i] = 0.0;
            } else {
                let h0 = x[i] - x[i - 1];
                let h1 = x[i + 1] - x[i];
                let w1 = 2.0 * h1 + h0;
                let w2 = h1 + 2.0 * h0;
                m[i] = (w1 + w2) / (w1 / d[i - 1] + w2 / d[i]);
            }
        }
        Some(Self { x, y, m })
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.x[0], *self.x.last().unwrap())
    }

    pub fn eval(&self, t: f64) -> f64 {
        let n = self.x.len();
        let i = match self.x.binary_search_by(|v| v.partial_cmp(&t).unwrap()) {
            Ok(i) => return self.y[i],
            Err(0) => 0,
            Err(i) if i >= n => n - 2,
            Err(i) => i - 1,
        };
        let h = self.x[i + 1] - self.x[i];
        let s = (t - self.x[i]) / h;
        let h00 = (1.0 + 2.0 * s) * (1.0 - s) * (1.0 - s);
        let h10 = s * (1.0 - s) * (1.0 - s);
        let h01 = s * s * (3.0 - 2.0 * s);
        let h11 = s * s * (s - 1.0);
        h00 * self.y[i] + h10 * h * self.m[i] + h01 * self.y[i + 1] + h11 * h * self.m[i + 1]
    }
}

/// Weighted least squares for `y = a + b·x`. Returns `(a, b)`.
pub fn linear_fit(x: &[f64], y: &[f64], w: &[f64]) -> (f64, f64) {
    let sw: f64 = w.iter().sum();
    let sx: f64 = x.iter().zip(w).map(|(x, w)| w * x).sum();
    let sy: f64 = y.iter().zip(w).map(|(y, w)| w * y).sum();
    let sxx: f64 = x.iter().zip(w).map(|(x, w)| w * x * x).sum();
    let sxy: f64 = x.iter().zip(y).zip(w).map(|((x, y), w)| w * x * y).sum();
    let det = sw * sxx - sx * sx;
    let b = (sw * sxy - sx * sy) / det;
    let a = (sy - b * sx) / sw;
    (a, b)
}

/// Least squares for `y = b·x` through the origin.
pub fn proportional_fit(x: &[f64], y: &[f64]) -> f64 {
    let sxy: f64 = x.iter().zip(y).map(|(x, y)| x * y).sum();
    let sxx: f64 = x.iter().map(|x| x * x).sum();
    sxy / sxx
}

/// Mean and standard error by non-overlapping batch means.
pub fn batch_mean(samples: &[f64], batches: usize) -> Estimate {
    let n = samples.len();
    if n == 0 {
        return Estimate::new(f64::NAN, f64::INFINITY);
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let b = batches.min(n).max(2);
    let size = n / b;
    if size == 0 {
        return Estimate::new(mean, f64::INFINITY);
    }
    let means: Vec<f64> = (0..b)
        .map(|k| samples[k * size..(k + 1) * size].iter().sum::<f64>() / size as f64)
        .collect();
    let mb = means.iter().sum::<f64>() / b as f64;
    let var = means.iter().map(|m| (m - mb) * (m - mb)).sum::<f64>() / (b - 1) as f64;
    Estimate::new(mean, (var / b as f64).sqrt())
}

pub fn ln_factorial(n: usize) -> f64 {
    (1..=n).map(|k| (k as f64).ln()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        for n in 1..12 {
            let (x, w) = gauss_legendre(n);
            for k in 0..(2 * n) {
                let q: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(k as i32)).sum();
                let exact = if k % 2 == 1 { 0.0 } else { 2.0 / (k as f64 + 1.0) };
                assert!((q - exact).abs() < 1e-13, "n={n} k={k} q={q}");
            }
        }
    }

    #[test]
    fn adaptive_quadrature_on_half_line() {
        let (v, _) = integrate_to_infinity(|x| 1.0 / (1.0 + x * x), 0.0, 1e-13, 1e-13);
        assert_relative_eq!(v, std::f64::consts::FRAC_PI_2, epsilon = 1e-10);
    }

    #[test]
    fn power_tail_matches_closed_forms() {
        use std::f64::consts::PI;
        // ∫_0^∞ r^k/(1+r^s) = (π/s) / sin(π(k+1)/s).
        for (k, s) in [(0.0, 1.5), (0.0, 3.0), (1.0, 2.5), (1.0, 4.0)] {
            let exact = PI / s / (PI * (k + 1.0) / s).sin();
            assert_relative_eq!(power_tail_integral(0.0, k, s), exact, max_relative = 1e-11);
        }
        // ∫_a^∞ dr/(1+r²) = π/2 - atan(a), across the split point R = 2.
        for a in [0.5, 2.0, 7.0] {
            assert_relative_eq!(power_tail_integral(a, 0.0, 2.0), PI / 2.0 - f64::atan(a), max_relative = 1e-11);
        }
    }

    #[test]
    fn pchip_is_monotone_and_interpolating() {
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|x| x * x * x).collect();
        let p = Pchip::new(x.clone(), y.clone()).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert_relative_eq!(p.eval(*a), *b);
        }
        let mut prev = f64::NEG_INFINITY;
        for i in 0..900 {
            let v = p.eval(i as f64 * 0.01);
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn linear_fit_recovers_line() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|x| 3.0 + 5.0 * x).collect();
        let (a, b) = linear_fit(&x, &y, &[1.0; 4]);
        assert_relative_eq!(a, 3.0, epsilon = 1e-12);
        assert_relative_eq!(b, 5.0, epsilon = 1e-12);
    }
}
