//! Corridor tilings, exact measures of rectilinear regions, boundary
//! regularity, inter-cube distances and integrals of the radial tail
//! `1/(1+|x|^s)` outside a cube.

use crate::configuration::SimBox;
use crate::error::{arg, Error, Result};
use crate::numerics::{integrate_adaptive, power_tail_integral};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Finite-size rate `ε_ℓ` for a tail decaying like `|x|^{-s}` in dimension `d`.
pub fn eps_ell(s: f64, d: usize, ell: f64) -> f64 {
    let a = s - d as f64;
    if (a - 1.0).abs() < 1e-12 {
        ell.ln() / ell
    } else if a > 1.0 {
        1.0 / ell
    } else {
        ell.powf(-a)
    }
}

/// Fixed-density rate `η_ℓ`.
pub fn eta_ell(s: f64, d: usize, ell: f64) -> f64 {
    let a = s - d as f64;
    if (a - 1.0).abs() < 1e-12 {
        ell.powf(-0.5) * ell.ln().sqrt()
    } else if a > 1.0 {
        ell.powf(-0.5)
    } else {
        ell.powf(-a / (1.0 + a))
    }
}

/// Surface area of the unit sphere `S^{d-1}`.
pub fn sphere_area(d: usize) -> f64 {
    match d {
        1 => 2.0,
        2 => 2.0 * PI,
        3 => 4.0 * PI,
        _ => {
            // 2 π^{d/2} / Γ(d/2) via the recursion |S^{d+1}| = 2π |S^{d-1}| / d
            let mut a = if d % 2 == 0 { 2.0 * PI } else { 2.0 };
            let mut k = if d % 2 == 0 { 2 } else { 1 };
            while k < d {
                a *= 2.0 * PI / k as f64;
                k += 2;
            }
            a
        }
    }
}

/// Cubes of side `ell` at pitch `pitch = ell + lambda`, shifted by `offset`:
/// `offset + k·pitch + [0, ell)^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorridorTiling {
    pub d: usize,
    pub ell: f64,
    pub lambda: f64,
    pub pitch: f64,
    pub eps: f64,
    pub offset: Vec<f64>,
    /// Particles per cube, `(ρ + ε) ℓ^d = ρ L^d`.
    pub n: f64,
    pub n_is_integer: bool,
}

/// Tiling with `L = ((ρ+ε)/ρ)^{1/d} ℓ`, so that `ρ L^d = (ρ+ε) ℓ^d`.
pub fn build_tiling(rho: f64, eps: f64, ell: f64, d: usize) -> Result<CorridorTiling> {
    if !(rho > 0.0 && eps >= 0.0 && ell > 0.0) || d == 0 {
        return arg("build_tiling needs rho > 0, eps >= 0, ell > 0, d >= 1");
    }
    let factor = ((rho + eps) / rho).powf(1.0 / d as f64);
    let pitch = factor * ell;
    let n = (rho + eps) * ell.powi(d as i32);
    Ok(CorridorTiling {
        d,
        ell,
        lambda: pitch - ell,
        pitch,
        eps,
        offset: vec![0.0; d],
        n,
        n_is_integer: (n - n.round()).abs() < 1e-9 * n.max(1.0),
    })
}

impl CorridorTiling {
    /// A tiling with explicit side and corridor width.
    pub fn with_corridor(d: usize, ell: f64, lambda: f64) -> Self {
        Self { d, ell, lambda, pitch: ell + lambda, eps: 0.0, offset: vec![0.0; d], n: 0.0, n_is_integer: false }
    }

    pub fn shifted(mut self, offset: Vec<f64>) -> Self {
        self.offset = offset;
        self
    }

    /// The occupied sub-cube with index `k`.
    pub fn cube(&self, k: &[i64]) -> SimBox {
        SimBox {
            origin: (0..self.d).map(|i| self.offset[i] + k[i] as f64 * self.pitch).collect(),
            lengths: vec![self.ell; self.d],
            boundary: Default::default(),
        }
    }
}

/// A finite union of axis-aligned boxes; measures are computed exactly
/// by coordinate compression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub d: usize,
    pub boxes: Vec<SimBox>,
}

impl Region {
    pub fn from_box(b: SimBox) -> Self {
        Self { d: b.d(), boxes: vec![b] }
    }

    pub fn union(boxes: Vec<SimBox>) -> Result<Self> {
        let d = boxes.first().map(|b| b.d()).ok_or_else(|| Error::Argument("empty region".into()))?;
        if boxes.iter().any(|b| b.d() != d) {
            return arg("region boxes must share a dimension");
        }
        Ok(Self { d, boxes })
    }

    pub fn measure(&self) -> f64 {
        union_measure(&self.boxes, None)
    }

    /// Bounding box.
    pub fn hull(&self) -> SimBox {
        let lo: Vec<f64> = (0..self.d).map(|k| self.boxes.iter().map(|b| b.origin[k]).fold(f64::INFINITY, f64::min)).collect();
        let hi: Vec<f64> = (0..self.d).map(|k| self.boxes.iter().map(|b| b.upper(k)).fold(f64::NEG_INFINITY, f64::max)).collect();
        SimBox { lengths: (0..self.d).map(|k| hi[k] - lo[k]).collect(), origin: lo, boundary: Default::default() }
    }

    /// `|Ω ∩ b|`.
    pub fn overlap(&self, b: &SimBox) -> f64 {
        let clipped: Vec<SimBox> = self.boxes.iter().filter_map(|x| intersect(x, b)).collect();
        union_measure(&clipped, None)
    }

    pub fn contains_box(&self, b: &SimBox) -> bool {
        let v = b.volume();
        (self.overlap(b) - v).abs() <= 1e-12 * v.max(1.0)
    }

    /// Measure of `{x ∈ Ω : B_∞(x, r) ⊄ Ω}`, the inner boundary layer of
    /// sup-norm width `r`. Equals the Euclidean layer for a single box.
    pub fn inner_layer(&self, r: f64) -> f64 {
        let hull = self.hull();
        let big = SimBox {
            origin: hull.origin.iter().map(|o| o - 2.0 * r - 1.0).collect(),
            lengths: hull.lengths.iter().map(|l| l + 4.0 * r + 2.0).collect(),
            boundary: Default::default(),
        };
        // Complement cells within the enlarged hull, dilated by r.
        let grid = compression_grid(&self.boxes, Some(&big));
        let mut dilated = Vec::new();
        for cell in grid_cells(&grid) {
            let centre: Vec<f64> = (0..self.d).map(|k| 0.5 * (cell.0[k] + cell.1[k])).collect();
            if !self.boxes.iter().any(|b| closed_contains(b, &centre)) {
                dilated.push(SimBox {
                    origin: (0..self.d).map(|k| cell.0[k] - r).collect(),
                    lengths: (0..self.d).map(|k| cell.1[k] - cell.0[k] + 2.0 * r).collect(),
                    boundary: Default::default(),
                });
            }
        }
        let mut pieces = Vec::new();
        for b in &self.boxes {
            for c in &dilated {
                if let Some(x) = intersect(b, c) {
                    pieces.push(x);
                }
            }
        }
        union_measure(&pieces, None).min(self.measure())
    }
}

fn closed_contains(b: &SimBox, p: &[f64]) -> bool {
    p.iter().enumerate().all(|(k, x)| *x >= b.origin[k] && *x <= b.upper(k))
}

fn intersect(a: &SimBox, b: &SimBox) -> Option<SimBox> {
    let d = a.d();
    let lo: Vec<f64> = (0..d).map(|k| a.origin[k].max(b.origin[k])).collect();
    let hi: Vec<f64> = (0..d).map(|k| a.upper(k).min(b.upper(k))).collect();
    if (0..d).any(|k| hi[k] <= lo[k]) {
        return None;
    }
    Some(SimBox { lengths: (0..d).map(|k| hi[k] - lo[k]).collect(), origin: lo, boundary: Default::default() })
}

fn compression_grid(boxes: &[SimBox], extra: Option<&SimBox>) -> Vec<Vec<f64>> {
    let d = boxes.first().map(|b| b.d()).or(extra.map(|b| b.d())).unwrap_or(0);
    (0..d)
        .map(|k| {
            let mut xs: Vec<f64> = boxes.iter().flat_map(|b| [b.origin[k], b.upper(k)]).collect();
            if let Some(e) = extra {
                xs.push(e.origin[k]);
                xs.push(e.upper(k));
            }
            xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            xs.dedup_by(|a, b| (*a - *b).abs() <= 1e-14 * (1.0 + a.abs()));
            xs
        })
        .collect()
}

fn grid_cells(grid: &[Vec<f64>]) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut out = vec![(Vec::new(), Vec::new())];
    for axis in grid {
        let mut next = Vec::new();
        for (lo, hi) in &out {
            for w in axis.windows(2) {
                let mut l = lo.clone();
                let mut h = hi.clone();
                l.push(w[0]);
                h.push(w[1]);
                next.push((l, h));
            }
        }
        out = next;
    }
    out
}

fn union_measure(boxes: &[SimBox], extra: Option<&SimBox>) -> f64 {
    if boxes.is_empty() {
        return 0.0;
    }
    let d = boxes[0].d();
    let grid = compression_grid(boxes, extra);
    grid_cells(&grid)
        .into_iter()
        .filter(|(lo, hi)| {
            let c: Vec<f64> = (0..d).map(|k| 0.5 * (lo[k] + hi[k])).collect();
            boxes.iter().any(|b| closed_contains(b, &c))
        })
        .map(|(lo, hi)| (0..d).map(|k| hi[k] - lo[k]).product::<f64>())
        .sum()
}

/// Shifted cubes inside the region covered by unshifted cubes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteriorCubes {
    pub indices: Vec<Vec<i64>>,
    /// `|Λ_{N,τ}|`, the union of the selected shifted cubes.
    pub inner_volume: f64,
    /// `|Ω \ Λ_{N,τ}|`.
    pub boundary_volume: f64,
}

/// Cubes of the lattice `τ + kL + [0, L)^d` lying inside `Λ_N`, the union of
/// the unshifted cubes `kL + [0, L)^d` contained in `Ω`.
pub fn interior_cubes(omega: &Region, pitch: f64, tau: &[f64]) -> Result<InteriorCubes> {
    if !(pitch > 0.0) || tau.len() != omega.d {
        return arg("interior_cubes needs pitch > 0 and a shift of matching dimension");
    }
    let d = omega.d;
    let hull = omega.hull();
    let range = |k: usize, shift: f64| -> (i64, i64) {
        (
            ((hull.origin[k] - shift) / pitch).floor() as i64 - 1,
            ((hull.upper(k) - shift) / pitch).ceil() as i64 + 1,
        )
    };
    let enumerate = |shift: &[f64]| -> Vec<Vec<i64>> {
        let mut out = vec![Vec::new()];
        for k in 0..d {
            let (a, b) = range(k, shift[k]);
            out = out
                .into_iter()
                .flat_map(|v: Vec<i64>| (a..=b).map(move |i| {
                    let mut v2 = v.clone();
                    v2.push(i);
                    v2
                }))
                .collect();
        }
        out
    };
    let cube = |k: &[i64], shift: &[f64]| SimBox {
        origin: (0..d).map(|i| shift[i] + k[i] as f64 * pitch).collect(),
        lengths: vec![pitch; d],
        boundary: Default::default(),
    };
    let zero = vec![0.0; d];
    let lambda_n: Vec<SimBox> = enumerate(&zero)
        .into_iter()
        .map(|k| cube(&k, &zero))
        .filter(|c| omega.contains_box(c))
        .collect();
    if lambda_n.is_empty() {
        return Ok(InteriorCubes { indices: vec![], inner_volume: 0.0, boundary_volume: omega.measure() });
    }
    let lambda_region = Region { d, boxes: lambda_n };
    let mut indices = Vec::new();
    let mut boxes = Vec::new();
    for k in enumerate(tau) {
        let c = cube(&k, tau);
        if lambda_region.contains_box(&c) {
            indices.push(k);
            boxes.push(c);
        }
    }
    let inner_volume = union_measure(&boxes, None);
    Ok(InteriorCubes { indices, inner_volume, boundary_volume: omega.measure() - inner_volume })
}

/// Largest `t0` on `t_grid` with `|{x ∈ Ω : d(x, ∂Ω) <= |Ω|^{1/d} t}| <= |Ω| t / t0`
/// for every grid value `t <= t0`.
pub fn regularity_constant(omega: &Region, t_grid: &[f64]) -> Result<f64> {
    if t_grid.is_empty() || t_grid.iter().any(|t| !(*t > 0.0)) {
        return arg("t_grid must be nonempty and positive");
    }
    let mut ts = t_grid.to_vec();
    ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let vol = omega.measure();
    let scale = vol.powf(1.0 / omega.d as f64);
    let ratio: Vec<f64> = ts
        .iter()
        .map(|&t| {
            let layer = omega.inner_layer(scale * t);
            if layer <= 0.0 {
                f64::INFINITY
            } else {
                vol * t / layer
            }
        })
        .collect();
    let mut best = 0.0;
    let mut running_min = f64::INFINITY;
    for (i, &t0) in ts.iter().enumerate() {
        running_min = running_min.min(ratio[i]);
        if t0 <= running_min * (1.0 + 1e-12) {
            best = t0;
        }
    }
    Ok(best)
}

/// Distance between the sub-cubes `k` and `k'` of a tiling.
pub fn cube_distance(k: &[i64], kp: &[i64], tiling: &CorridorTiling) -> Result<f64> {
    if k == kp {
        return arg("cube_distance needs distinct cubes");
    }
    let gap2: f64 = k
        .iter()
        .zip(kp)
        .map(|(a, b)| {
            let g = (tiling.pitch * (a - b).abs() as f64 - tiling.ell).max(0.0);
            g * g
        })
        .sum();
    Ok(gap2.sqrt())
}

/// Where the tail integral is evaluated.
#[derive(Debug, Clone, PartialEq)]
pub enum TailMode {
    /// `∫_{C_ℓ^c} dy / (1 + |x0 - y|^s)`.
    Pointwise(Vec<f64>),
    /// `∫_{C_ℓ} ∫_{C_ℓ^c} dy dx / (1 + |x - y|^s)`.
    Double,
}

/// Tail integral outside the centered cube `C_ℓ = [-ℓ/2, ℓ/2]^d`, `d ∈ {1, 2}`.
pub fn outside_tail_integral(ell: f64, s: f64, d: usize, mode: &TailMode) -> Result<f64> {
    if s <= d as f64 {
        return Err(Error::Divergence(format!("s = {s} <= d = {d}")));
    }
    if !(ell > 0.0) {
        return arg("cube side must be positive");
    }
    let h = 0.5 * ell;
    match (d, mode) {
        (1, TailMode::Pointwise(x)) => Ok(power_tail_integral(h - x[0], 0.0, s) + power_tail_integral(h + x[0], 0.0, s)),
        (2, TailMode::Pointwise(x)) => {
            // Polar coordinates about x0: ∫_θ ∫_{R(θ)}^∞ r dr / (1 + r^s).
            let (x0, y0) = (x[0], x[1]);
            let exit = |t: f64| -> f64 {
                let (c, sn) = (t.cos(), t.sin());
                let rx = if c > 0.0 { (h - x0) / c } else if c < 0.0 { (-h - x0) / c } else { f64::INFINITY };
                let ry = if sn > 0.0 { (h - y0) / sn } else if sn < 0.0 { (-h - y0) / sn } else { f64::INFINITY };
                rx.min(ry).max(0.0)
            };
            let mut breaks: Vec<f64> = [(h - x0, h - y0), (-h - x0, h - y0), (-h - x0, -h - y0), (h - x0, -h - y0)]
                .iter()
                .map(|(a, b)| b.atan2(*a).rem_euclid(2.0 * PI))
                .collect();
            breaks.push(0.0);
            breaks.push(2.0 * PI);
            breaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let f = |t: f64| power_tail_integral(exit(t), 1.0, s);
            Ok(breaks.windows(2).map(|w| integrate_adaptive(&f, w[0], w[1], 1e-13, 1e-10).0).sum())
        }
        (1, TailMode::Double) => {
            // 2 [∫_0^ℓ u/(1+u^s) du + ℓ ∫_ℓ^∞ du/(1+u^s)]
            let near = integrate_adaptive(|u| u / (1.0 + u.powf(s)), 0.0, ell, 1e-14, 1e-12).0;
            Ok(2.0 * (near + ell * power_tail_integral(ell, 0.0, s)))
        }
        (2, TailMode::Double) => {
            // ∫_{R^2} (ℓ² - (ℓ-|u1|)_+ (ℓ-|u2|)_+) / (1+|u|^s) du in polar form.
            let radial = |t: f64| {
                let (c, sn) = (t.cos(), t.sin());
                let g = |r: f64| r * (ell * ell - (ell - r * c).max(0.0) * (ell - r * sn).max(0.0)) / (1.0 + r.powf(s));
                let mut kinks = vec![ell / c.max(1e-300), ell / sn.max(1e-300)];
                kinks.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let k1 = kinks[0].min(1e6 * ell);
                let k2 = kinks[1].min(1e6 * ell);
                let a = integrate_adaptive(g, 0.0, k1, 1e-14, 1e-11).0;
                let b = if k2 > k1 { integrate_adaptive(g, k1, k2, 1e-14, 1e-11).0 } else { 0.0 };
                a + b + ell * ell * power_tail_integral(k2, 1.0, s)
            };
            Ok(4.0 * integrate_adaptive(radial, 0.0, 0.5 * PI, 1e-12, 1e-9).0)
        }
        _ => Err(Error::Unsupported(format!("tail integrals are implemented for d <= 2, got {d}"))),
    }
}

/// Distance from `x0` to the boundary of the centered cube of side `ell`.
pub fn distance_to_boundary(x0: &[f64], ell: f64) -> f64 {
    x0.iter().map(|x| 0.5 * ell - x.abs()).fold(f64::INFINITY, f64::min).max(0.0)
}

/// A constant `c` for which the pointwise outside-tail bound
/// `∫ ≤ c / (1 + dist^{s-d})` holds: `2|S^{d-1}| max(∫_0^∞ r^{d-1}/(1+r^s), 1/(s-d))`.
pub fn tail_pointwise_constant(s: f64, d: usize) -> f64 {
    let df = d as f64;
    let total = (PI / s) / (PI * df / s).sin();
    2.0 * sphere_area(d) * total.max(1.0 / (s - df))
}

/// A constant `c` for which the double outside-tail integral is `≤ c ℓ^d ε_ℓ` for `ℓ >= 2`.
pub fn tail_double_constant(s: f64, d: usize) -> f64 {
    let a = s - d as f64;
    let k = if (a - 1.0).abs() < 1e-12 {
        1.0
    } else if a > 1.0 {
        (PI / a) / (PI / a).sin()
    } else {
        1.0 + 1.0 / (1.0 - a)
    };
    2.0 * d as f64 * tail_pointwise_constant(s, d) * k
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn tiling_examples() {
        let t = build_tiling(1.0, 1.0, 2.0, 1).unwrap();
        assert_relative_eq!(t.pitch, 4.0);
        assert_relative_eq!(t.lambda, 2.0);
        assert_relative_eq!(t.n, 4.0);
        assert!(t.n_is_integer);
        let t0 = build_tiling(1.0, 1e-14, 3.0, 2).unwrap();
        assert!(t0.lambda < 1e-12 && (t0.pitch - 3.0).abs() < 1e-12);
    }

    #[test]
    fn interior_cube_examples() {
        let small = Region::from_box(SimBox::cube(2, 0.5));
        let r = interior_cubes(&small, 1.0, &[0.0, 0.0]).unwrap();
        assert!(r.indices.is_empty());
        assert_relative_eq!(r.boundary_volume, 0.25);
        let big = Region::from_box(SimBox::cube(2, 8.0));
        let r = interior_cubes(&big, 2.0, &[0.0, 0.0]).unwrap();
        assert_eq!(r.indices.len(), 16);
        assert_eq!(r.boundary_volume, 0.0);
    }

    #[test]
    fn regularity_examples() {
        let grid: Vec<f64> = (1..=1000).map(|i| i as f64 / 1000.0).collect();
        let unit = Region::from_box(SimBox::cube(1, 1.0));
        assert_relative_eq!(regularity_constant(&unit, &grid).unwrap(), 0.5);
        let scaled = Region::from_box(SimBox::cube(1, 7.0));
        assert_relative_eq!(regularity_constant(&scaled, &grid).unwrap(), 0.5);
        let sq = Region::from_box(SimBox::cube(2, 2.0));
        let l_shape = Region::union(vec![
            SimBox::new(vec![0.0, 0.0], vec![2.0, 1.0]).unwrap(),
            SimBox::new(vec![0.0, 1.0], vec![1.0, 1.0]).unwrap(),
        ])
        .unwrap();
        assert_relative_eq!(l_shape.measure(), 3.0);
        let t_sq = regularity_constant(&sq, &grid).unwrap();
        let t_l = regularity_constant(&l_shape, &grid).unwrap();
        assert!(t_l < t_sq, "{t_l} vs {t_sq}");
    }

    #[test]
    fn cube_distance_examples() {
        let t = CorridorTiling::with_corridor(1, 1.0, 1.0);
        assert_relative_eq!(cube_distance(&[0], &[2], &t).unwrap(), 3.0);
        assert_relative_eq!(cube_distance(&[0], &[1], &t).unwrap(), 1.0);
        assert!(cube_distance(&[1], &[1], &t).is_err());
    }

    #[test]
    fn one_dimensional_tail_matches_closed_form() {
        // ∫_{|y| >= 2} dy/(1+|y|^3) = 2 ∫_2^∞ dy/(1+y^3), antiderivative of 1/(1+y^3):
        // (1/6) ln((y+1)^2/(y^2-y+1)) + (1/√3) atan((2y-1)/√3)
        let f = |y: f64| {
            (1.0 / 6.0) * ((y + 1.0).powi(2) / (y * y - y + 1.0)).ln() + (1.0 / 3f64.sqrt()) * ((2.0 * y - 1.0) / 3f64.sqrt()).atan()
        };
        let exact = 2.0 * (PI / (2.0 * 3f64.sqrt()) - f(2.0));
        let v = outside_tail_integral(4.0, 3.0, 1, &TailMode::Pointwise(vec![0.0])).unwrap();
        assert!((v - exact).abs() < 1e-10, "{v} vs {exact}");
        let near = outside_tail_integral(4.0, 3.0, 1, &TailMode::Pointwise(vec![1.5])).unwrap();
        assert!(near > v);
        assert!(matches!(outside_tail_integral(4.0, 1.0, 1, &TailMode::Double), Err(Error::Divergence(_))));
    }

    #[test]
    fn two_dimensional_double_integral_is_consistent() {
        // Double integral equals the integral of the pointwise integral over the cube.
        let ell = 2.0;
        let s = 4.0;
        let double = outside_tail_integral(ell, s, 2, &TailMode::Double).unwrap();
        let n = 24;
        let (gx, gw) = crate::numerics::gauss_legendre(n);
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                let p = vec![0.5 * ell * gx[i], 0.5 * ell * gx[j]];
                acc += gw[i] * gw[j] * 0.25 * ell * ell * outside_tail_integral(ell, s, 2, &TailMode::Pointwise(p)).unwrap();
            }
        }
        assert!((acc - double).abs() < 2e-3 * double, "{acc} vs {double}");
    }

    #[test]
    fn double_integral_scales_like_surface() {
        let vals: Vec<f64> = [4.0, 8.0, 16.0, 32.0]
            .iter()
            .map(|&l| outside_tail_integral(l, 3.0, 1, &TailMode::Double).unwrap() / l)
            .collect();
        // ratio to 1/ℓ tends to a constant
        let c: Vec<f64> = vals.iter().zip([4.0, 8.0, 16.0, 32.0]).map(|(v, l)| v * l).collect();
        assert!((c[3] - c[2]).abs() / c[3] < 0.05);
    }

    proptest! {
        #[test]
        fn tiling_identity(rho in 0.01f64..10.0, eps in 0.0f64..5.0, ell in 0.5f64..20.0, d in 1usize..4) {
            let t = build_tiling(rho, eps, ell, d).unwrap();
            let lhs = rho * t.pitch.powi(d as i32);
            prop_assert!((lhs - t.n).abs() <= 1e-12 * t.n.max(1.0));
            prop_assert!((t.pitch - t.ell - t.lambda).abs() <= 1e-12 * t.pitch);
        }

        #[test]
        fn partition_identity(a in 0.5f64..9.0, b in 0.5f64..9.0, tx in -1.0f64..1.0, ty in -1.0f64..1.0, pitch in 0.3f64..2.0) {
            let omega = Region::from_box(SimBox::new(vec![0.1, -0.3], vec![a, b]).unwrap());
            let r = interior_cubes(&omega, pitch, &[tx, ty]).unwrap();
            prop_assert!((r.inner_volume + r.boundary_volume - omega.measure()).abs() < 1e-9);
            prop_assert!(r.inner_volume <= omega.measure() + 1e-12);
        }

        #[test]
        fn delta_bound_sup_norm(k1 in -20i64..=20, k2 in -20i64..=20, ell in 0.5f64..3.0, lambda in 0.0f64..2.0) {
            prop_assume!(k1 != 0 || k2 != 0);
            let t = CorridorTiling::with_corridor(2, ell, lambda);
            let dist = cube_distance(&[0, 0], &[k1, k2], &t).unwrap();
            let kinf = k1.abs().max(k2.abs()) as f64;
            prop_assert!(dist >= lambda + t.pitch * (kinf - 1.0) - 1e-12);
            prop_assert_eq!(dist, cube_distance(&[k1, k2], &[0, 0], &t).unwrap());
        }
    }
}
