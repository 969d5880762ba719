//! Boxes, finite point configurations, occupancy counts and pair energies.

use crate::error::{arg, Error, Result};
use crate::potentials::{Radial, RepulsiveSplit, HARD_CORE_ENERGY};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    #[default]
    Free,
    Periodic,
}

/// Axis-aligned box `origin + [0, lengths)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimBox {
    pub origin: Vec<f64>,
    pub lengths: Vec<f64>,
    #[serde(default)]
    pub boundary: Boundary,
}

impl SimBox {
    pub fn new(origin: Vec<f64>, lengths: Vec<f64>) -> Result<Self> {
        if origin.len() != lengths.len() || origin.is_empty() {
            return arg("origin and lengths must have the same nonzero dimension");
        }
        if lengths.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
            return arg("box lengths must be positive and finite");
        }
        Ok(Self { origin, lengths, boundary: Boundary::Free })
    }

    /// `[a, b)` in one dimension.
    pub fn interval(a: f64, b: f64) -> Self {
        Self { origin: vec![a], lengths: vec![b - a], boundary: Boundary::Free }
    }

    /// `[0, side)^d`.
    pub fn cube(d: usize, side: f64) -> Self {
        Self { origin: vec![0.0; d], lengths: vec![side; d], boundary: Boundary::Free }
    }

    /// `[-side/2, side/2)^d`.
    pub fn centered_cube(d: usize, side: f64) -> Self {
        Self { origin: vec![-0.5 * side; d], lengths: vec![side; d], boundary: Boundary::Free }
    }

    pub fn periodic(mut self) -> Self {
        self.boundary = Boundary::Periodic;
        self
    }

    pub fn d(&self) -> usize {
        self.lengths.len()
    }

    pub fn volume(&self) -> f64 {
        self.lengths.iter().product()
    }

    pub fn upper(&self, axis: usize) -> f64 {
        self.origin[axis] + self.lengths[axis]
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.iter().enumerate().all(|(k, x)| *x >= self.origin[k] && *x < self.upper(k))
    }

    /// Closed containment of another box.
    pub fn contains_box(&self, other: &SimBox) -> bool {
        (0..self.d()).all(|k| {
            other.origin[k] >= self.origin[k] - 1e-12 && other.upper(k) <= self.upper(k) + 1e-12
        })
    }

    pub fn random_point<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.d()).map(|k| self.origin[k] + rng.gen::<f64>() * self.lengths[k]).collect()
    }

    /// Component-wise separation, minimum image when periodic.
    #[inline]
    pub fn separation(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut r2 = 0.0;
        for k in 0..a.len() {
            let mut dx = a[k] - b[k];
            if self.boundary == Boundary::Periodic {
                let l = self.lengths[k];
                dx -= l * (dx / l).round();
            }
            r2 += dx * dx;
        }
        r2.sqrt()
    }

    /// Overlap volume with another box.
    pub fn overlap(&self, other: &SimBox) -> f64 {
        (0..self.d())
            .map(|k| (self.upper(k).min(other.upper(k)) - self.origin[k].max(other.origin[k])).max(0.0))
            .product()
    }
}

/// A finite point set in `R^d`, stored flat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Configuration {
    pub d: usize,
    pub points: Vec<f64>,
}

impl Configuration {
    pub fn empty(d: usize) -> Self {
        Self { d, points: Vec::new() }
    }

    pub fn free_points(d: usize, points: Vec<f64>) -> Self {
        assert_eq!(points.len() % d.max(1), 0);
        Self { d, points }
    }

    /// Points given in a box; every point must lie inside it.
    pub fn in_box(domain: &SimBox, points: Vec<f64>) -> Result<Self> {
        let d = domain.d();
        if points.len() % d != 0 {
            return arg("flat point list length must be a multiple of d");
        }
        let cfg = Self { d, points };
        if (0..cfg.len()).any(|i| !domain.contains(cfg.point(i))) {
            return arg("configuration has points outside its box");
        }
        Ok(cfg)
    }

    pub fn poisson<R: Rng>(domain: &SimBox, n: usize, rng: &mut R) -> Self {
        let mut points = Vec::with_capacity(n * domain.d());
        for _ in 0..n {
            points.extend(domain.random_point(rng));
        }
        Self { d: domain.d(), points }
    }

    pub fn len(&self) -> usize {
        if self.d == 0 {
            0
        } else {
            self.points.len() / self.d
        }
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    #[inline]
    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.d..(i + 1) * self.d]
    }

    pub fn push(&mut self, p: &[f64]) {
        debug_assert_eq!(p.len(), self.d);
        self.points.extend_from_slice(p);
    }

    /// Remove point `i` by swapping in the last point.
    pub fn swap_remove(&mut self, i: usize) {
        let n = self.len();
        let d = self.d;
        if i != n - 1 {
            for k in 0..d {
                self.points[i * d + k] = self.points[(n - 1) * d + k];
            }
        }
        self.points.truncate((n - 1) * d);
    }

    pub fn set_point(&mut self, i: usize, p: &[f64]) {
        self.points[i * self.d..(i + 1) * self.d].copy_from_slice(p);
    }

    pub fn translated(&self, v: &[f64]) -> Self {
        let mut out = self.clone();
        for (i, x) in out.points.iter_mut().enumerate() {
            *x += v[i % self.d];
        }
        out
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self { d: self.d, points: self.points.iter().map(|x| x * factor).collect() }
    }

    /// Points lying in `q`.
    pub fn restrict(&self, q: &SimBox) -> Self {
        let mut out = Self::empty(self.d);
        for i in 0..self.len() {
            if q.contains(self.point(i)) {
                out.push(self.point(i));
            }
        }
        out
    }

    /// Union of two configurations.
    pub fn union(&self, other: &Configuration) -> Self {
        let mut out = self.clone();
        out.points.extend_from_slice(&other.points);
        out
    }

    /// Lexicographically sorted copy.
    pub fn sorted(&self) -> Self {
        let mut rows: Vec<&[f64]> = (0..self.len()).map(|i| self.point(i)).collect();
        rows.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        Self { d: self.d, points: rows.concat() }
    }

    pub fn count_in(&self, q: &SimBox) -> usize {
        (0..self.len()).filter(|&i| q.contains(self.point(i))).count()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let header: Vec<String> = (0..self.d).map(|k| format!("x{k}")).collect();
        w.write_record(&header).map_err(io_err)?;
        let s = self.sorted();
        for i in 0..s.len() {
            let row: Vec<String> = s.point(i).iter().map(|x| format!("{x:?}")).collect();
            w.write_record(&row).map_err(io_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Argument(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let d = r.headers().map_err(io_err)?.len();
        let mut points = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(io_err)?;
            for field in rec.iter() {
                points.push(field.trim().parse::<f64>().map_err(|e| Error::Argument(e.to_string()))?);
            }
        }
        if d == 0 || points.len() % d != 0 {
            return arg("malformed configuration csv");
        }
        Ok(Self { d, points })
    }
}

fn io_err(e: csv::Error) -> Error {
    Error::Argument(e.to_string())
}

/// `H`, `h` and `H - h` for a split interaction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub total: f64,
    pub repulsive: f64,
    pub stable_part: f64,
}

#[inline]
fn saturating_add(acc: f64, v: f64) -> f64 {
    if v >= HARD_CORE_ENERGY || acc >= HARD_CORE_ENERGY {
        HARD_CORE_ENERGY
    } else {
        acc + v
    }
}

/// Direct O(n²) pair sum in free space.
pub fn pair_sum<R: Radial + ?Sized>(cfg: &Configuration, w: &R) -> f64 {
    let n = cfg.len();
    let mut e = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let r = distance(cfg.point(i), cfg.point(j));
            e = saturating_add(e, w.at(r));
            if e >= HARD_CORE_ENERGY {
                return HARD_CORE_ENERGY;
            }
        }
    }
    e
}

#[inline]
pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Pair sum with separations measured in `domain` (minimum image when periodic).
pub fn pair_sum_in<R: Radial + ?Sized>(cfg: &Configuration, w: &R, domain: &SimBox) -> f64 {
    let n = cfg.len();
    let mut e = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            e = saturating_add(e, w.at(domain.separation(cfg.point(i), cfg.point(j))));
            if e >= HARD_CORE_ENERGY {
                return HARD_CORE_ENERGY;
            }
        }
    }
    e
}

/// Pair sum over separations `< cutoff` using a cell list over the bounding box.
pub fn pair_sum_cell_list<R: Radial + ?Sized>(cfg: &Configuration, w: &R, cutoff: f64) -> f64 {
    let n = cfg.len();
    let d = cfg.d;
    if n < 2 {
        return 0.0;
    }
    let mut lo = vec![f64::INFINITY; d];
    for i in 0..n {
        for k in 0..d {
            lo[k] = lo[k].min(cfg.point(i)[k]);
        }
    }
    let cell_of = |p: &[f64]| -> Vec<i64> { (0..d).map(|k| ((p[k] - lo[k]) / cutoff).floor() as i64).collect() };
    let mut cells: BTreeMap<Vec<i64>, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        cells.entry(cell_of(cfg.point(i))).or_default().push(i);
    }
    let neighbours: Vec<Vec<i64>> = {
        let mut out = vec![vec![]];
        for _ in 0..d {
            out = out
                .into_iter()
                .flat_map(|v| (-1..=1).map(move |o| {
                    let mut v2 = v.clone();
                    v2.push(o);
                    v2
                }))
                .collect();
        }
        out
    };
    let mut e = 0.0;
    for (c, members) in &cells {
        for off in &neighbours {
            let other: Vec<i64> = c.iter().zip(off).map(|(a, b)| a + b).collect();
            if other < *c {
                continue;
            }
            let Some(others) = cells.get(&other) else { continue };
            let same = other == *c;
            for (ai, &i) in members.iter().enumerate() {
                let start = if same { ai + 1 } else { 0 };
                for &j in &others[start..] {
                    let r = distance(cfg.point(i), cfg.point(j));
                    if r < cutoff {
                        e = saturating_add(e, w.at(r));
                    }
                }
            }
        }
    }
    e
}

/// `H(x) = Σ_{i<j} w(x_i - x_j)`. Uses a cell list when the configuration
/// spans more than four cutoff radii, else the direct double loop.
pub fn total_energy<R: Radial + ?Sized>(cfg: &Configuration, w: &R, cutoff: f64) -> f64 {
    let n = cfg.len();
    if n < 2 {
        return 0.0;
    }
    let span = (0..cfg.d)
        .map(|k| {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for i in 0..n {
                lo = lo.min(cfg.point(i)[k]);
                hi = hi.max(cfg.point(i)[k]);
            }
            hi - lo
        })
        .fold(0.0, f64::max);
    if cutoff.is_finite() && cutoff > 0.0 && span > 4.0 * cutoff {
        pair_sum_cell_list(cfg, w, cutoff)
    } else {
        pair_sum(cfg, w)
    }
}

/// Interaction of a point `p` with every point of `cfg` except index `skip`.
pub fn interaction_with<R: Radial + ?Sized>(
    cfg: &Configuration,
    p: &[f64],
    skip: Option<usize>,
    w: &R,
    domain: &SimBox,
) -> f64 {
    let mut e = 0.0;
    for j in 0..cfg.len() {
        if Some(j) == skip {
            continue;
        }
        e = saturating_add(e, w.at(domain.separation(p, cfg.point(j))));
        if e >= HARD_CORE_ENERGY {
            return HARD_CORE_ENERGY;
        }
    }
    e
}

/// `W(x, y) = Σ_i Σ_k w(x_i - y_k)`.
pub fn cross_energy<R: Radial + ?Sized>(x: &Configuration, y: &Configuration, w: &R) -> f64 {
    let mut e = 0.0;
    for i in 0..x.len() {
        for k in 0..y.len() {
            e = saturating_add(e, w.at(distance(x.point(i), y.point(k))));
        }
    }
    e
}

/// `h_Q(x) = h(x ∩ Q)` with `h` built from the repulsive part `w1`.
pub fn repulsive_energy(cfg: &Configuration, split: &RepulsiveSplit, q: &SimBox) -> f64 {
    pair_sum(&cfg.restrict(q), &split.repulsive_part())
}

pub fn energy_breakdown(cfg: &Configuration, split: &RepulsiveSplit) -> EnergyBreakdown {
    let total = pair_sum(cfg, &split.potential);
    let repulsive = pair_sum(cfg, &split.repulsive_part());
    let stable_part = pair_sum(cfg, &split.stable_part());
    EnergyBreakdown { total, repulsive, stable_part }
}

/// Occupation numbers of the lattice of cubes `offset + ell·(i + [0,1)^d)`.
pub fn cube_counts(cfg: &Configuration, ell: f64, offset: &[f64]) -> Result<BTreeMap<Vec<i64>, usize>> {
    if !(ell > 0.0) {
        return arg("cube side must be positive");
    }
    let mut out = BTreeMap::new();
    for i in 0..cfg.len() {
        let p = cfg.point(i);
        let key: Vec<i64> = (0..cfg.d).map(|k| ((p[k] - offset[k]) / ell).floor() as i64).collect();
        *out.entry(key).or_insert(0) += 1;
    }
    Ok(out)
}
