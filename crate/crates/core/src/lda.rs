//! Piecewise-constant density profiles, the windowed variation `δρ_ℓ`, the
//! local density approximation `∫ f_T(ρ(x)) dx` and the right-hand sides of
//! the associated error estimates.
//!
//! Profiles live on a uniform rectilinear grid and are extended by zero
//! outside it. Edge windows therefore see a jump to zero, which dominates
//! the variation term of indicator-like profiles.

use crate::configuration::SimBox;
use crate::error::{arg, Error, Result};
use crate::numerics::{bisect_last_true, Pchip};
use crate::thermo::FreeEnergyCurve;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityProfile {
    pub origin: Vec<f64>,
    /// Grid spacing, equal on every axis.
    pub h: f64,
    pub shape: Vec<usize>,
    /// Row-major, last axis fastest.
    pub values: Vec<f64>,
    /// Declared bound `ρ <= m`.
    pub m: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ProfileHeader {
    origin: Vec<f64>,
    h: f64,
    shape: Vec<usize>,
    m: f64,
}

impl DensityProfile {
    pub fn new(origin: Vec<f64>, h: f64, shape: Vec<usize>, values: Vec<f64>, m: f64) -> Result<Self> {
        if origin.len() != shape.len() || origin.is_empty() {
            return arg("origin and shape must have the same dimension");
        }
        if !(h > 0.0) || shape.iter().product::<usize>() != values.len() {
            return arg("need a positive spacing and one value per cell");
        }
        if values.iter().any(|v| !(*v >= 0.0) || *v > m * (1.0 + 1e-12)) {
            return arg(format!("density values must lie in [0, {m}]"));
        }
        Ok(Self { origin, h, shape, values, m })
    }

    /// Sample `f` at cell centres of `[origin, origin + h shape)`.
    pub fn from_fn<F: Fn(&[f64]) -> f64>(origin: Vec<f64>, h: f64, shape: Vec<usize>, m: f64, f: F) -> Result<Self> {
        let n: usize = shape.iter().product();
        let mut p = Self { origin, h, shape, values: vec![0.0; n], m };
        p.values = (0..n).map(|i| f(&p.cell_center(i))).collect();
        Self::new(p.origin, p.h, p.shape, p.values, m)
    }

    /// `ρ0` on a box made of whole cells.
    pub fn constant(omega: &SimBox, h: f64, rho0: f64) -> Result<Self> {
        let shape: Vec<usize> = omega.lengths.iter().map(|l| (l / h).round() as usize).collect();
        if shape.iter().zip(&omega.lengths).any(|(n, l)| (*n as f64 * h - l).abs() > 1e-9 * l) {
            return Err(Error::Resolution("box sides must be multiples of the spacing".into()));
        }
        let n = shape.iter().product();
        Self::new(omega.origin.clone(), h, shape, vec![rho0; n], rho0)
    }

    pub fn d(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn cell_volume(&self) -> f64 {
        self.h.powi(self.d() as i32)
    }

    pub fn multi_index(&self, mut i: usize) -> Vec<usize> {
        let mut idx = vec![0; self.d()];
        for k in (0..self.d()).rev() {
            idx[k] = i % self.shape[k];
            i /= self.shape[k];
        }
        idx
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.shape).fold(0, |acc, (i, n)| acc * n + i)
    }

    pub fn cell_center(&self, i: usize) -> Vec<f64> {
        self.multi_index(i).iter().enumerate().map(|(k, j)| self.origin[k] + (*j as f64 + 0.5) * self.h).collect()
    }

    pub fn cell_box(&self, i: usize) -> SimBox {
        let origin = self.multi_index(i).iter().enumerate().map(|(k, j)| self.origin[k] + *j as f64 * self.h).collect();
        SimBox { origin, lengths: vec![self.h; self.d()], boundary: Default::default() }
    }

    /// Grid extent.
    pub fn support_box(&self) -> SimBox {
        SimBox {
            origin: self.origin.clone(),
            lengths: self.shape.iter().map(|n| *n as f64 * self.h).collect(),
            boundary: Default::default(),
        }
    }

    /// Value at a point; zero off the grid.
    pub fn at(&self, x: &[f64]) -> f64 {
        let mut idx = Vec::with_capacity(self.d());
        for k in 0..self.d() {
            let t = ((x[k] - self.origin[k]) / self.h).floor();
            if t < 0.0 || t >= self.shape[k] as f64 {
                return 0.0;
            }
            idx.push(t as usize);
        }
        self.values[self.flat_index(&idx)]
    }

    /// `∫ g(ρ)`, exact for piecewise-constant `ρ`.
    pub fn integral<G: Fn(f64) -> f64>(&self, g: G) -> f64 {
        self.values.iter().map(|v| g(*v)).sum::<f64>() * self.cell_volume()
    }

    pub fn mass(&self) -> f64 {
        self.integral(|r| r)
    }

    pub fn sqrt_mass(&self) -> f64 {
        self.integral(f64::sqrt)
    }

    /// `∫ ρ log ρ` with `0 log 0 = 0`.
    pub fn entropy(&self) -> f64 {
        self.integral(|r| if r > 0.0 { r * r.ln() } else { 0.0 })
    }

    /// `∫ |∇ρ|^p` from central differences with zero extension; jumps are
    /// smeared over one cell.
    pub fn gradient_p_norm(&self, p: f64) -> f64 {
        let d = self.d();
        let mut total = 0.0;
        for i in 0..self.len() {
            let idx = self.multi_index(i);
            let mut g2 = 0.0;
            for k in 0..d {
                let side = |delta: i64| {
                    let j = idx[k] as i64 + delta;
                    if j < 0 || j >= self.shape[k] as i64 {
                        0.0
                    } else {
                        let mut jj = idx.clone();
                        jj[k] = j as usize;
                        self.values[self.flat_index(&jj)]
                    }
                };
                let g = (side(1) - side(-1)) / (2.0 * self.h);
                g2 += g * g;
            }
            total += g2.powf(0.5 * p);
        }
        total * self.cell_volume()
    }

    /// CSV with a JSON header line: `{"origin":..,"h":..,"shape":..,"m":..}`
    /// then `cell,rho` rows. Values are written with round-trip precision.
    pub fn to_csv(&self) -> Result<String> {
        let header = ProfileHeader { origin: self.origin.clone(), h: self.h, shape: self.shape.clone(), m: self.m };
        let mut out = format!("# {}\n", serde_json::to_string(&header).map_err(|e| Error::Argument(e.to_string()))?);
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["cell", "rho"]).map_err(|e| Error::Argument(e.to_string()))?;
        for (i, v) in self.values.iter().enumerate() {
            w.write_record(&[i.to_string(), format!("{v:?}")]).map_err(|e| Error::Argument(e.to_string()))?;
        }
        out.push_str(&String::from_utf8(w.into_inner().map_err(|e| Error::Argument(e.to_string()))?).unwrap());
        Ok(out)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let (first, rest) = text.split_once('\n').ok_or_else(|| Error::Argument("empty profile".into()))?;
        let header: ProfileHeader = serde_json::from_str(first.trim_start_matches('#').trim())
            .map_err(|e| Error::Argument(format!("profile header: {e}")))?;
        let mut r = csv::Reader::from_reader(rest.as_bytes());
        let mut values = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::Argument(e.to_string()))?;
            let v: f64 = rec.get(1).unwrap_or("").parse().map_err(|_| Error::Argument("bad density value".into()))?;
            values.push(v);
        }
        Self::new(header.origin, header.h, header.shape, values, header.m)
    }
}

/// Index ranges of cells overlapping `[c - half, c + half]` with positive
/// measure on one axis; `touches_outside` when the window leaves the grid.
fn axis_window(origin: f64, h: f64, n: usize, c: f64, half: f64) -> (usize, usize, bool) {
    let lo = (c - half - origin) / h;
    let hi = (c + half - origin) / h;
    let first = lo.floor().max(0.0);
    let last = (hi.ceil() - 1.0).min(n as f64 - 1.0);
    let outside = lo < 0.0 || hi > n as f64;
    if last < first {
        return (1, 0, true);
    }
    (first as usize, last as usize, outside)
}

/// `δρ_ℓ(z) = (ess sup - ess inf of ρ on z + [-ℓ/2, ℓ/2]^d) / ℓ`.
pub fn delta_rho_at(profile: &DensityProfile, ell: f64, z: &[f64]) -> f64 {
    let d = profile.d();
    let mut ranges = Vec::with_capacity(d);
    let mut outside = false;
    for k in 0..d {
        let (a, b, o) = axis_window(profile.origin[k], profile.h, profile.shape[k], z[k], 0.5 * ell);
        if a > b {
            return 0.0;
        }
        outside |= o;
        ranges.push((a, b));
    }
    let (mut lo, mut hi) = if outside { (0.0f64, 0.0f64) } else { (f64::INFINITY, f64::NEG_INFINITY) };
    let mut idx: Vec<usize> = ranges.iter().map(|r| r.0).collect();
    loop {
        let v = profile.values[profile.flat_index(&idx)];
        lo = lo.min(v);
        hi = hi.max(v);
        let mut k = d;
        loop {
            if k == 0 {
                return (hi - lo) / ell;
            }
            k -= 1;
            if idx[k] < ranges[k].1 {
                idx[k] += 1;
                break;
            }
            idx[k] = ranges[k].0;
        }
    }
}

pub fn delta_rho(profile: &DensityProfile, ell: f64, z_grid: &[Vec<f64>]) -> Result<Vec<f64>> {
    if ell < 2.0 * profile.h {
        return Err(Error::Resolution(format!("window {ell} must cover at least two cells of size {}", profile.h)));
    }
    Ok(z_grid.iter().map(|z| delta_rho_at(profile, ell, z)).collect())
}

/// Breakpoints in `z_k` where the window's cell range changes.
fn axis_breakpoints(origin: f64, h: f64, n: usize, half: f64) -> Vec<f64> {
    let mut pts: Vec<f64> = (0..=n)
        .flat_map(|i| {
            let e = origin + i as f64 * h;
            [e - half, e + half]
        })
        .collect();
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup_by(|a, b| (*a - *b).abs() < 1e-12 * h);
    pts
}

/// `∫_{ℝ^d} δρ_ℓ(z)^p dz`, exact: `δρ_ℓ` is constant on the product of
/// intervals between window breakpoints.
pub fn delta_rho_p_integral(profile: &DensityProfile, ell: f64, p: f64) -> Result<f64> {
    if ell < 2.0 * profile.h {
        return Err(Error::Resolution(format!("window {ell} must cover at least two cells of size {}", profile.h)));
    }
    let d = profile.d();
    let axes: Vec<Vec<f64>> =
        (0..d).map(|k| axis_breakpoints(profile.origin[k], profile.h, profile.shape[k], 0.5 * ell)).collect();
    let counts: Vec<usize> = axes.iter().map(|a| a.len() - 1).collect();
    let total: usize = counts.iter().product();
    let mut sum = 0.0;
    let mut z = vec![0.0; d];
    for flat in 0..total {
        let mut rem = flat;
        let mut vol = 1.0;
        for k in (0..d).rev() {
            let j = rem % counts[k];
            rem /= counts[k];
            z[k] = 0.5 * (axes[k][j] + axes[k][j + 1]);
            vol *= axes[k][j + 1] - axes[k][j];
        }
        let v = delta_rho_at(profile, ell, &z);
        if v > 0.0 {
            sum += v.powf(p) * vol;
        }
    }
    Ok(sum)
}

/// `∫ f_T(ρ(x)) dx` with the propagated curve error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LdaValue {
    pub value: f64,
    pub error: f64,
}

pub fn lda_functional(profile: &DensityProfile, fcurve: &FreeEnergyCurve) -> Result<LdaValue> {
    let xs: Vec<f64> = fcurve.samples.iter().map(|s| s.x).collect();
    let ys: Vec<f64> = fcurve.samples.iter().map(|s| s.value).collect();
    let es: Vec<f64> = fcurve.samples.iter().map(|s| s.error).collect();
    let interp = Pchip::new(xs.clone(), ys).ok_or_else(|| Error::Argument("density curve needs two or more increasing samples".into()))?;
    let errs = Pchip::new(xs, es).unwrap();
    let (a, b) = interp.domain();
    let positive = profile.values.iter().filter(|v| **v > 0.0);
    let (lo, hi) = positive.fold((f64::INFINITY, 0.0f64), |(l, h), v| (l.min(*v), h.max(*v)));
    if hi > 0.0 && (lo < a - 1e-12 || hi > b + 1e-12) {
        return Err(Error::Coverage(format!("curve covers [{a}, {b}] but the profile spans [{lo}, {hi}]")));
    }
    let cell = profile.cell_volume();
    let mut value = 0.0;
    let mut error = 0.0;
    for v in &profile.values {
        if *v > 0.0 {
            value += interp.eval(*v) * cell;
            error += errs.eval(*v).abs() * cell;
        }
    }
    Ok(LdaValue { value, error })
}

/// Strict lower threshold on `b` for exponent `p`.
pub fn b_threshold(p: f64) -> f64 {
    if p >= 2.0 {
        2.0 - 1.0 / (2.0 * p)
    } else {
        1.5 + 1.0 / (2.0 * p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorRhs {
    pub value: f64,
    pub sqrt_mass: f64,
    pub variation: f64,
    /// `b` exceeds the threshold for `p`.
    pub b_admissible: bool,
}

/// `C/√ℓ (∫√ρ + ℓ^{bp} ∫ δρ_ℓ^p)`.
pub fn lda_error_rhs(profile: &DensityProfile, ell: f64, p: f64, b: f64, c: f64) -> Result<ErrorRhs> {
    if p < 1.0 {
        return arg("p must be at least 1");
    }
    let sqrt_mass = profile.sqrt_mass();
    let variation = delta_rho_p_integral(profile, ell, p)?;
    Ok(ErrorRhs {
        value: c / ell.sqrt() * (sqrt_mass + ell.powf(b * p) * variation),
        sqrt_mass,
        variation,
        b_admissible: b > b_threshold(p),
    })
}

/// `Cε(∫√ρ + ε^{-2bp} ∫|∇ρ|^p)`.
pub fn gradient_error_rhs(profile: &DensityProfile, eps: f64, p: f64, b: f64, c: f64) -> Result<f64> {
    if p <= profile.d() as f64 {
        return arg("the gradient form needs p > d");
    }
    Ok(c * eps * (profile.sqrt_mass() + eps.powf(-2.0 * b * p) * profile.gradient_p_norm(p)))
}

/// Minimiser of `ε ↦ Cε(a + ε^{-k} g)` over a grid, returned with its value.
pub fn best_eps(grid: &[f64], a: f64, g: f64, k: f64, c: f64) -> (f64, f64) {
    grid.iter()
        .map(|e| (*e, c * e * (a + e.powf(-k) * g)))
        .fold((f64::NAN, f64::INFINITY), |best, x| if x.1 < best.1 { x } else { best })
}

/// `C|Ω|^{1 - 1/(4dr)}`.
pub fn constant_density_error(omega: &SimBox, r: f64, c: f64) -> Result<f64> {
    if r <= 1.0 {
        return arg("r must exceed 1");
    }
    let d = omega.d() as f64;
    Ok(c * omega.volume().powf(1.0 - 1.0 / (4.0 * d * r)))
}

/// `∫_{B(x,R)} ρ`; cells cut by the sphere are refined on an `8^d` subgrid in
/// `d >= 2` and exact in `d = 1`.
pub fn ball_mass(profile: &DensityProfile, x: &[f64], r: f64) -> f64 {
    let d = profile.d();
    let mut total = 0.0;
    for i in 0..profile.len() {
        let v = profile.values[i];
        if v == 0.0 {
            continue;
        }
        let cb = profile.cell_box(i);
        if d == 1 {
            let a = cb.origin[0].max(x[0] - r);
            let b = (cb.origin[0] + profile.h).min(x[0] + r);
            if b > a {
                total += v * (b - a);
            }
            continue;
        }
        let (mut near, mut far) = (0.0f64, 0.0f64);
        for k in 0..d {
            let lo = cb.origin[k];
            let hi = lo + profile.h;
            let dn = if x[k] < lo { lo - x[k] } else if x[k] > hi { x[k] - hi } else { 0.0 };
            let df = (x[k] - lo).abs().max((x[k] - hi).abs());
            near += dn * dn;
            far += df * df;
        }
        if near.sqrt() >= r {
            continue;
        }
        if far.sqrt() <= r {
            total += v * profile.cell_volume();
            continue;
        }
        let sub = 8usize;
        let n = sub.pow(d as u32);
        let step = profile.h / sub as f64;
        let mut inside = 0;
        for s in 0..n {
            let mut rem = s;
            let mut dist2 = 0.0;
            for k in 0..d {
                let j = rem % sub;
                rem /= sub;
                let c = cb.origin[k] + (j as f64 + 0.5) * step;
                dist2 += (c - x[k]) * (c - x[k]);
            }
            if dist2.sqrt() <= r {
                inside += 1;
            }
        }
        total += v * profile.cell_volume() * inside as f64 / n as f64;
    }
    total
}

/// Largest `R` with `∫_{B(x,R)} ρ = 1`.
pub fn local_radius(profile: &DensityProfile, x: &[f64]) -> Result<f64> {
    if profile.mass() < 1.0 - 1e-12 {
        return Err(Error::Infeasible(format!("total mass {} is below one", profile.mass())));
    }
    let sb = profile.support_box();
    let mut hi = 0.0f64;
    for k in 0..profile.d() {
        hi += (x[k] - sb.origin[k]).abs().max((x[k] - sb.upper(k)).abs()).powi(2);
    }
    let hi = hi.sqrt() + profile.h;
    Ok(bisect_last_true(|r| ball_mass(profile, x, r) <= 1.0 + 1e-12, 0.0, hi, 1e-12 * hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::thermo::{CurveKind, CurveSample, Provenance};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn indicator(len: usize, h: f64, rho0: f64) -> DensityProfile {
        DensityProfile::constant(&SimBox::interval(0.0, len as f64 * h), h, rho0).unwrap()
    }

    #[test]
    fn delta_rho_examples() {
        let p = indicator(100, 0.1, 1.0);
        assert_eq!(delta_rho_at(&p, 2.0, &[5.0]), 0.0);
        assert_abs_diff_eq!(delta_rho_at(&p, 2.0, &[0.0]), 0.5);
        let ramp = DensityProfile::from_fn(vec![0.0], 0.001, vec![10_000], 1.0, |x| x[0] / 10.0).unwrap();
        assert_abs_diff_eq!(delta_rho_at(&ramp, 2.0, &[5.0]), 0.1, epsilon = 1e-4);
        assert!(matches!(delta_rho(&p, 0.15, &[vec![1.0]]), Err(Error::Resolution(_))));
    }

    /// Oracle: dense Riemann sum of `δρ_ℓ^p` over a fine `z` grid.
    fn window_enumeration(p: &DensityProfile, ell: f64, pw: f64) -> f64 {
        let sb = p.support_box();
        let (a, b) = (sb.origin[0] - ell, sb.upper(0) + ell);
        let n = 200_000;
        let dz = (b - a) / n as f64;
        (0..n).map(|i| delta_rho_at(p, ell, &[a + (i as f64 + 0.5) * dz]).powf(pw) * dz).sum()
    }

    #[test]
    fn variation_integral_of_an_indicator() {
        let p = indicator(10, 1.0, 1.0);
        let v = delta_rho_p_integral(&p, 2.0, 2.0).unwrap();
        assert_abs_diff_eq!(v, 4.0 * 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(v, window_enumeration(&p, 2.0, 2.0), epsilon = 1e-4);
        let rhs = lda_error_rhs(&p, 2.0, 2.0, 2.0, 1.0).unwrap();
        assert_abs_diff_eq!(rhs.value, (10.0 + 16.0 * 1.0) / 2f64.sqrt(), epsilon = 1e-12);
        assert!(rhs.b_admissible);
        assert!(!lda_error_rhs(&p, 2.0, 2.0, 1.7, 1.0).unwrap().b_admissible);
        let zero = indicator(10, 1.0, 0.0);
        assert_eq!(lda_error_rhs(&zero, 2.0, 2.0, 2.0, 1.0).unwrap().value, 0.0);
    }

    #[test]
    fn variation_integral_of_a_random_profile() {
        let vals = [0.3, 0.9, 0.1, 0.5, 0.5, 0.7, 0.2, 0.0, 0.4];
        let p = DensityProfile::new(vec![0.0], 0.5, vec![9], vals.to_vec(), 1.0).unwrap();
        for ell in [1.0, 1.3, 2.7] {
            let exact = delta_rho_p_integral(&p, ell, 2.0).unwrap();
            assert_abs_diff_eq!(exact, window_enumeration(&p, ell, 2.0), epsilon = 2e-4);
        }
    }

    #[test]
    fn indicator_variation_is_bounded_by_the_boundary_layer() {
        for d in [1usize, 2] {
            let omega = SimBox::cube(d, 6.0);
            let p = DensityProfile::constant(&omega, 0.5, 0.8).unwrap();
            for (ell, pw) in [(1.0, 1.0), (2.0, 2.0), (3.0, 3.0)] {
                let v = delta_rho_p_integral(&p, ell, pw).unwrap();
                let layer = if d == 1 { 2.0 * ell } else { (6.0 + ell * 2f64.sqrt()).powi(2) - (6.0 - ell * 2f64.sqrt()).powi(2) };
                assert!(v <= 0.8f64.powf(pw) / ell.powf(pw) * layer + 1e-12, "d={d} ell={ell}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn scaling_relation(vals in proptest::collection::vec(0.0f64..1.0, 8), h_up in proptest::bool::ANY, zi in 0usize..40) {
            // ρ'(x) = ρ(hx) on a grid of spacing 1/h.
            let h = if h_up { 2.0 } else { 0.5 };
            let base = DensityProfile::new(vec![0.0], 1.0, vec![8], vals.clone(), 1.0).unwrap();
            let scaled = DensityProfile::new(vec![0.0], 1.0 / h, vec![8], vals, 1.0).unwrap();
            let ell = 3.0 / h.min(1.0);
            let z = -2.0 + 0.37 * zi as f64;
            let lhs = delta_rho_at(&scaled, ell, &[z]);
            let rhs = h * delta_rho_at(&base, h * ell, &[h * z]);
            prop_assert!((lhs - rhs).abs() < 1e-12);
            prop_assert!(lhs >= 0.0);
        }
    }

    #[test]
    fn lda_functional_examples() {
        let samples: Vec<CurveSample> = (0..=40)
            .map(|i| {
                let r = 0.05 * i as f64;
                CurveSample { x: r, value: if r > 0.0 { r * r.ln() - r } else { 0.0 }, error: 0.0 }
            })
            .collect();
        let curve = FreeEnergyCurve::new(1.0, f64::INFINITY, CurveKind::F, Provenance::Analytic, samples).unwrap();
        let p = indicator(20, 0.1, 1.0);
        assert_abs_diff_eq!(lda_functional(&p, &curve).unwrap().value, -2.0, epsilon = 1e-12);
        assert_eq!(lda_functional(&indicator(20, 0.1, 0.0), &curve).unwrap().value, 0.0);
        assert!(matches!(lda_functional(&indicator(20, 0.1, 2.5), &curve), Err(Error::Coverage(_))));

        let quad: Vec<CurveSample> =
            (0..=200).map(|i| CurveSample { x: 0.01 * i as f64, value: 0.5 * (0.01 * i as f64).powi(2), error: 0.0 }).collect();
        let curve = FreeEnergyCurve::new(1.0, f64::INFINITY, CurveKind::F, Provenance::Analytic, quad).unwrap();
        let bump = DensityProfile::from_fn(vec![-4.0], 0.01, vec![800], 1.0, |x| (-x[0] * x[0]).exp()).unwrap();
        // ∫ e^{-2x²}/2 over ℝ, truncated tails below 1e-13.
        let exact = 0.5 * (std::f64::consts::PI / 2.0).sqrt();
        let v = lda_functional(&bump, &curve).unwrap().value;
        assert_abs_diff_eq!(v, exact, epsilon = 1e-5);
    }

    #[test]
    fn gradient_rhs_and_eps_choice() {
        let p = indicator(10, 1.0, 1.0);
        assert!(gradient_error_rhs(&p, 0.5, 1.0, 2.0, 1.0).is_err());
        let flat_interior = DensityProfile::new(vec![0.0], 1.0, vec![3], vec![1.0, 1.0, 1.0], 1.0).unwrap();
        assert!(flat_interior.gradient_p_norm(2.0) > 0.0);
        // Minimum of ε(a + g ε^{-k}) is at ε = (g(k-1)/a)^{1/k}.
        let (a, g, k) = (3.0, 0.2, 4.0);
        let grid: Vec<f64> = (1..=20_000).map(|i| i as f64 * 1e-4).collect();
        let (e, _) = best_eps(&grid, a, g, k, 1.0);
        assert_abs_diff_eq!(e, (g * (k - 1.0) / a).powf(1.0 / k), epsilon = 2e-4);
    }

    /// Oracle: Morrey-type bound `∫δρ_ℓ^p ≤ K ∫|∇ρ|^p` with a fitted `K`.
    #[test]
    fn morrey_consistency_on_smooth_profiles() {
        let mut ratios = Vec::new();
        for width in [1.0, 2.0, 4.0] {
            let p = DensityProfile::from_fn(vec![-20.0], 0.02, vec![2000], 1.0, |x| (-(x[0] / width).powi(2)).exp()).unwrap();
            for ell in [0.5, 1.0, 2.0] {
                ratios.push(delta_rho_p_integral(&p, ell, 2.0).unwrap() / p.gradient_p_norm(2.0));
            }
        }
        let k = ratios.iter().cloned().fold(0.0, f64::max);
        assert!(k < 1.5, "{ratios:?}");
    }

    #[test]
    fn constant_density_error_examples() {
        assert_abs_diff_eq!(constant_density_error(&SimBox::interval(0.0, 1.0), 2.0, 3.0).unwrap(), 3.0);
        assert_abs_diff_eq!(constant_density_error(&SimBox::interval(0.0, 256.0), 2.0, 1.0).unwrap(), 256f64.powf(0.875), epsilon = 1e-9);
        assert!(constant_density_error(&SimBox::interval(0.0, 1.0), 1.0, 1.0).is_err());
        let a = constant_density_error(&SimBox::interval(0.0, 64.0), 1.5, 1.0).unwrap();
        let b = constant_density_error(&SimBox::interval(0.0, 64.0), 3.0, 1.0).unwrap();
        assert!(b > a);
    }

    #[test]
    fn local_radius_examples() {
        let one = indicator(1000, 0.01, 1.0);
        assert_abs_diff_eq!(local_radius(&one, &[5.0]).unwrap(), 0.5, epsilon = 1e-9);
        let four = indicator(1000, 0.01, 4.0);
        assert_abs_diff_eq!(local_radius(&four, &[5.0]).unwrap(), 0.125, epsilon = 1e-9);
        let small = indicator(10, 0.01, 1.0);
        assert!(matches!(local_radius(&small, &[0.05]), Err(Error::Infeasible(_))));
        // Oracle: invert the cumulative mass of a step profile by hand.
        let step = DensityProfile::new(vec![0.0], 1.0, vec![4], vec![0.2, 0.2, 1.0, 1.0], 1.0).unwrap();
        // Around x=1.5: mass(R) = 0.4 R for R <= 0.5, then 0.2 + 0.2 (R - 0.5) + (R - 0.5).
        let r = local_radius(&step, &[1.5]).unwrap();
        assert_abs_diff_eq!(r, 0.5 + 0.8 / 1.2, epsilon = 1e-9);
    }

    #[test]
    fn csv_round_trip() {
        let p = DensityProfile::from_fn(vec![0.5, -1.0], 0.3, vec![4, 3], 1.0, |x| (x[0] * x[1]).sin().abs() / 3.0).unwrap();
        let back = DensityProfile::from_csv(&p.to_csv().unwrap()).unwrap();
        assert_eq!(p, back);
        assert!(DensityProfile::new(vec![0.0], 1.0, vec![2], vec![0.5, 2.0], 1.0).is_err());
    }
}
