//! Pair potentials, their regularity envelope, repulsive/stable splittings
//! and the lattice constants built from a radial tail bound.

use crate::configuration::Configuration;
use crate::error::{arg, Error, Result};
use crate::numerics::{bisect_last_true, power_tail_integral};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Saturating energy used for hard cores and coincident points.
pub const HARD_CORE_ENERGY: f64 = 1e300;

/// A radial function of the pair distance.
pub trait Radial: Sync + Send {
    fn at(&self, r: f64) -> f64;
}

#[derive(Debug, Clone, PartialEq)]
pub enum PotentialKind {
    /// `a/r^12 - b/r^6`
    LennardJones { a: f64, b: f64 },
    /// `exp(-m r)/r`
    Yukawa { m: f64 },
    /// `(r0/r)^alpha`, a hard sphere of diameter `r0` when `alpha = ∞`.
    SoftCore,
    /// Piecewise-linear table, constant below the first node, zero past the last.
    Tabulated { r: Vec<f64>, w: Vec<f64> },
    Zero,
}

/// A radial pair interaction together with its envelope parameters:
/// `kappa` bounds the core and tail from both sides, `r0` is the core range,
/// `alpha` the core exponent and `s` the tail exponent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPotential", into = "RawPotential")]
pub struct PairPotential {
    pub kind: PotentialKind,
    pub kappa: f64,
    pub r0: f64,
    pub alpha: f64,
    pub s: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct RawPotential {
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    a: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    b: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    m: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    grid_r: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    grid_w: Option<Vec<f64>>,
    kappa: f64,
    r0: f64,
    alpha: f64,
    s: f64,
}

impl TryFrom<RawPotential> for PairPotential {
    type Error = Error;

    fn try_from(raw: RawPotential) -> Result<Self> {
        let need = |v: Option<f64>, name: &str| {
            v.ok_or_else(|| Error::Argument(format!("potential kind `{}` needs `{}`", raw.kind, name)))
        };
        let kind = match raw.kind.as_str() {
            "lennard_jones" => PotentialKind::LennardJones { a: need(raw.a, "a")?, b: need(raw.b, "b")? },
            "yukawa" => PotentialKind::Yukawa { m: need(raw.m, "m")? },
            "soft_core" => PotentialKind::SoftCore,
            "tabulated" => {
                let r = raw.grid_r.clone().ok_or_else(|| Error::Argument("tabulated needs grid_r".into()))?;
                let w = raw.grid_w.clone().ok_or_else(|| Error::Argument("tabulated needs grid_w".into()))?;
                if r.len() != w.len() || r.is_empty() || r.windows(2).any(|p| p[1] <= p[0]) || r[0] < 0.0 {
                    return arg("tabulated grid must be nonempty, increasing and match grid_w");
                }
                PotentialKind::Tabulated { r, w }
            }
            "zero" => PotentialKind::Zero,
            other => return arg(format!("unknown potential kind `{other}`")),
        };
        let p = PairPotential { kind, kappa: raw.kappa, r0: raw.r0, alpha: raw.alpha, s: raw.s };
        p.validate()?;
        Ok(p)
    }
}

impl From<PairPotential> for RawPotential {
    fn from(p: PairPotential) -> Self {
        let mut raw = RawPotential { kappa: p.kappa, r0: p.r0, alpha: p.alpha, s: p.s, ..Default::default() };
        match p.kind {
            PotentialKind::LennardJones { a, b } => {
                raw.kind = "lennard_jones".into();
                raw.a = Some(a);
                raw.b = Some(b);
            }
            PotentialKind::Yukawa { m } => {
                raw.kind = "yukawa".into();
                raw.m = Some(m);
            }
            PotentialKind::SoftCore => raw.kind = "soft_core".into(),
            PotentialKind::Tabulated { r, w } => {
                raw.kind = "tabulated".into();
                raw.grid_r = Some(r);
                raw.grid_w = Some(w);
            }
            PotentialKind::Zero => raw.kind = "zero".into(),
        }
        raw
    }
}

#[derive(Deserialize)]
struct PotentialFile {
    potential: PairPotential,
}

impl PairPotential {
    pub fn new(kind: PotentialKind, kappa: f64, r0: f64, alpha: f64, s: f64) -> Result<Self> {
        let p = Self { kind, kappa, r0, alpha, s };
        p.validate()?;
        Ok(p)
    }

    pub fn zero() -> Self {
        Self { kind: PotentialKind::Zero, kappa: 1.0, r0: 0.0, alpha: 0.0, s: 3.0 }
    }

    pub fn soft_core(r0: f64, alpha: f64) -> Self {
        Self { kind: PotentialKind::SoftCore, kappa: 1.0, r0, alpha, s: alpha.min(12.0).max(3.0) }
    }

    pub fn lennard_jones(a: f64, b: f64) -> Self {
        Self { kind: PotentialKind::LennardJones { a, b }, kappa: 1.0, r0: 1.0, alpha: 12.0, s: 6.0 }
    }

    pub fn yukawa(m: f64) -> Self {
        Self { kind: PotentialKind::Yukawa { m }, kappa: 1.0, r0: 1.0, alpha: 1.0, s: 3.0 }
    }

    /// Replace the envelope parameters.
    pub fn with_envelope(mut self, kappa: f64, r0: f64, alpha: f64, s: f64) -> Self {
        self.kappa = kappa;
        self.r0 = r0;
        self.alpha = alpha;
        self.s = s;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0) || self.r0 < 0.0 || self.alpha < 0.0 || !(self.s > 0.0) {
            return arg("envelope needs kappa > 0, r0 >= 0, alpha >= 0, s > 0");
        }
        if let PotentialKind::SoftCore = self.kind {
            if !(self.r0 > 0.0) {
                return arg("soft_core needs r0 > 0");
            }
        }
        Ok(())
    }

    /// Parse a `[potential]` table from TOML text.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let f: PotentialFile = toml::from_str(text).map_err(|e| Error::Argument(e.to_string()))?;
        Ok(f.potential)
    }

    pub fn is_hard_core(&self) -> bool {
        matches!(self.kind, PotentialKind::SoftCore) && self.alpha.is_infinite()
    }

    /// True when `w >= 0` everywhere, so that every configuration has `H >= 0`.
    pub fn is_nonnegative(&self) -> bool {
        match &self.kind {
            PotentialKind::LennardJones { a, b } => *a >= 0.0 && *b <= 0.0,
            PotentialKind::Yukawa { .. } | PotentialKind::SoftCore | PotentialKind::Zero => true,
            PotentialKind::Tabulated { w, .. } => w.iter().all(|v| *v >= 0.0),
        }
    }

    /// A constant `k` with `H_n >= -k n` for every configuration.
    pub fn stability_bound(&self) -> f64 {
        if self.is_nonnegative() {
            0.0
        } else {
            self.kappa
        }
    }

    /// Value at separation `r >= 0`; diverging cores saturate at [`HARD_CORE_ENERGY`].
    pub fn value(&self, r: f64) -> f64 {
        let r = r.abs();
        let v = match &self.kind {
            PotentialKind::Zero => 0.0,
            PotentialKind::LennardJones { a, b } => {
                if r == 0.0 {
                    return if *a > 0.0 { HARD_CORE_ENERGY } else { 0.0 };
                }
                let r6 = r.powi(-6);
                a * r6 * r6 - b * r6
            }
            PotentialKind::Yukawa { m } => {
                if r == 0.0 {
                    return HARD_CORE_ENERGY;
                }
                (-m * r).exp() / r
            }
            PotentialKind::SoftCore => {
                if self.alpha.is_infinite() {
                    return if r < self.r0 { HARD_CORE_ENERGY } else { 0.0 };
                }
                if r == 0.0 {
                    return HARD_CORE_ENERGY;
                }
                if self.alpha.fract() == 0.0 && self.alpha <= 64.0 {
                    (self.r0 / r).powi(self.alpha as i32)
                } else {
                    (self.r0 / r).powf(self.alpha)
                }
            }
            PotentialKind::Tabulated { r: grid, w } => {
                if r <= grid[0] {
                    w[0]
                } else if r >= *grid.last().unwrap() {
                    0.0
                } else {
                    let i = grid.partition_point(|g| *g <= r) - 1;
                    let t = (r - grid[i]) / (grid[i + 1] - grid[i]);
                    w[i] + t * (w[i + 1] - w[i])
                }
            }
        };
        if v.is_nan() || v >= HARD_CORE_ENERGY {
            HARD_CORE_ENERGY
        } else {
            v
        }
    }

    /// Checked evaluation.
    pub fn evaluate(&self, r: f64) -> Result<f64> {
        if r < 0.0 || r.is_nan() {
            return arg(format!("separation must be nonnegative, got {r}"));
        }
        Ok(self.value(r))
    }

    /// Radius beyond which the envelope tail `kappa/(1+r^s)` is below `tol`.
    pub fn cutoff(&self, tol: f64) -> f64 {
        match &self.kind {
            PotentialKind::Zero => 0.0,
            PotentialKind::Tabulated { r, .. } => *r.last().unwrap(),
            PotentialKind::SoftCore if self.alpha.is_infinite() => self.r0,
            _ => (self.kappa / tol - 1.0).max(0.0).powf(1.0 / self.s).max(self.r0),
        }
    }
}

impl Radial for PairPotential {
    fn at(&self, r: f64) -> f64 {
        self.value(r)
    }
}

/// Outcome of the envelope check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularityReport {
    pub pass: bool,
    /// Largest signed excess over the envelope; nonpositive when the check passes.
    pub worst_violation: f64,
    pub witness: f64,
}

fn envelope_excess(w: &PairPotential, r: f64) -> f64 {
    let v = w.value(r);
    let tail = w.kappa / (1.0 + r.powf(w.s));
    if r < w.r0 {
        if w.alpha.is_infinite() {
            return if v >= HARD_CORE_ENERGY { f64::NEG_INFINITY } else { HARD_CORE_ENERGY };
        }
        let core = (w.r0 / r).powf(w.alpha);
        let lower = core / w.kappa - tail;
        let upper = w.kappa * core + tail;
        if v >= HARD_CORE_ENERGY {
            // A saturated value only respects an upper envelope that saturates too.
            return if upper >= HARD_CORE_ENERGY { f64::NEG_INFINITY } else { HARD_CORE_ENERGY };
        }
        (lower - v).max(v - upper)
    } else {
        v.abs() - tail
    }
}

/// Check both envelope inequalities at every grid point.
pub fn check_regularity(w: &PairPotential, grid: &[f64]) -> Result<RegularityReport> {
    if grid.is_empty() || grid.iter().any(|r| !(*r > 0.0)) {
        return arg("grid must be nonempty with positive entries");
    }
    let mut worst = f64::NEG_INFINITY;
    let mut witness = grid[0];
    for &r in grid {
        let e = envelope_excess(w, r);
        let scale = 1e-12 * (1.0 + w.value(r).abs().min(1e12));
        let e = e - scale;
        if e > worst {
            worst = e;
            witness = r;
        }
    }
    Ok(RegularityReport { pass: worst <= 0.0, worst_violation: worst, witness })
}

/// Log-spaced grid of `n` points on `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

/// The default validation grid: 1000 log-spaced points on `[1e-3, 1e3]`.
pub fn default_grid() -> Vec<f64> {
    log_grid(1e-3, 1e3, 1000)
}

/// Coarse search for the smallest `kappa` (and an accompanying `r0`) making
/// the envelope hold on `grid` for fixed `alpha` and `s`.
pub fn fit_envelope(w: &PairPotential, alpha: f64, s: f64, grid: &[f64]) -> Option<(f64, f64)> {
    let kappas = log_grid(1e-2, 1e4, 121);
    let r0s = log_grid(1e-2, 1e2, 161);
    for &k in &kappas {
        let mut best: Option<(f64, f64)> = None;
        for &r0 in &r0s {
            let trial = w.clone().with_envelope(k, r0, alpha, s);
            if let Ok(rep) = check_regularity(&trial, grid) {
                if rep.pass {
                    best = Some((k, r0));
                    break;
                }
            }
        }
        if best.is_some() {
            return best;
        }
    }
    None
}

/// Lower witness for the stability constant of a radial interaction.
#[derive(Debug, Clone)]
pub struct StabilityScan {
    pub kappa_hat: f64,
    pub worst_config: Configuration,
}

fn per_particle_energy<R: Radial + ?Sized>(w: &R, pts: &[f64], d: usize) -> f64 {
    let n = pts.len() / d;
    let mut e = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let r2: f64 = (0..d).map(|k| (pts[i * d + k] - pts[j * d + k]).powi(2)).sum();
            e += w.at(r2.sqrt());
        }
    }
    e / n as f64
}

/// Maximise `-Σ w(x_j - x_k)/n` over random starts followed by a
/// coordinate pattern search. Deterministic given `seed`.
pub fn stability_scan<R: Radial + ?Sized>(
    w: &R,
    d: usize,
    n_max: usize,
    trials: usize,
    length_scale: f64,
    seed: u64,
) -> Result<StabilityScan> {
    if n_max < 2 || d == 0 {
        return arg("stability_scan needs n_max >= 2 and d >= 1");
    }
    let results: Vec<(f64, Vec<f64>, usize)> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let n = rng.gen_range(2..=n_max);
            let side = length_scale * (n as f64).powf(1.0 / d as f64) * 1.5;
            let mut pts: Vec<f64> = (0..n * d).map(|_| rng.gen::<f64>() * side).collect();
            let mut e = per_particle_energy(w, &pts, d);
            let mut step = 0.25 * length_scale;
            while step > 1e-7 * length_scale {
                let mut improved = false;
                for c in 0..pts.len() {
                    for sgn in [1.0, -1.0] {
                        pts[c] += sgn * step;
                        let e2 = per_particle_energy(w, &pts, d);
                        if e2 < e - 1e-15 {
                            e = e2;
                            improved = true;
                            break;
                        }
                        pts[c] -= sgn * step;
                    }
                }
                if !improved {
                    step *= 0.5;
                }
            }
            (-e, pts, n)
        })
        .collect();
    let mut best = (0.0, Vec::new());
    for (k, pts, _) in results {
        if k > best.0 {
            best = (k, pts);
        }
    }
    let cfg = Configuration::free_points(d, best.1);
    Ok(StabilityScan { kappa_hat: best.0.max(0.0), worst_config: cfg })
}

/// How the repulsive part `w1` is carved out of `w` once `delta` and `A` are fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRule {
    /// `w1 = max(w, 0)` on `|x| <= delta`, zero outside.
    Truncation,
    /// `w1 = A` on `|x| <= delta`, zero outside. Leaves the core in `w2`,
    /// which keeps `w2` stable for potentials with an attractive well.
    Indicator,
}

/// `w = w1 + w2` with `w1 >= 0`, `w1 >= A` on `|x| <= delta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepulsiveSplit {
    pub potential: PairPotential,
    pub a: f64,
    pub delta: f64,
    pub rule: SplitRule,
}

impl RepulsiveSplit {
    pub fn w1(&self, r: f64) -> f64 {
        let r = r.abs();
        if r > self.delta {
            return 0.0;
        }
        match self.rule {
            SplitRule::Truncation => self.potential.value(r).max(0.0),
            SplitRule::Indicator => self.a,
        }
    }

    pub fn w2(&self, r: f64) -> f64 {
        let r = r.abs();
        let w = self.potential.value(r);
        if r > self.delta {
            return w;
        }
        match self.rule {
            SplitRule::Truncation => {
                if w >= HARD_CORE_ENERGY {
                    0.0
                } else {
                    w - w.max(0.0)
                }
            }
            SplitRule::Indicator => {
                if w >= HARD_CORE_ENERGY {
                    HARD_CORE_ENERGY
                } else {
                    w - self.a
                }
            }
        }
    }

    pub fn stable_part(&self) -> StablePart<'_> {
        StablePart(self)
    }

    pub fn repulsive_part(&self) -> RepulsivePart<'_> {
        RepulsivePart(self)
    }
}

pub struct StablePart<'a>(&'a RepulsiveSplit);
pub struct RepulsivePart<'a>(&'a RepulsiveSplit);

impl Radial for StablePart<'_> {
    fn at(&self, r: f64) -> f64 {
        self.0.w2(r)
    }
}

impl Radial for RepulsivePart<'_> {
    fn at(&self, r: f64) -> f64 {
        self.0.w1(r)
    }
}

/// Half-height split: `delta` is the largest length up to the core range
/// with `w(delta) > 0` and `w >= w(delta)/2` on `(0, delta]`; `A = w(delta)/2`.
pub fn repulsive_split(w: &PairPotential) -> Result<RepulsiveSplit> {
    repulsive_split_with(w, SplitRule::Truncation)
}

pub fn repulsive_split_with(w: &PairPotential, rule: SplitRule) -> Result<RepulsiveSplit> {
    if matches!(w.kind, PotentialKind::Zero) || !(w.r0 > 0.0) {
        return Err(Error::Unsupported("potential has no positive core".into()));
    }
    let cap = w.r0;
    let grid_min = |delta: f64| {
        (1..=2000)
            .map(|i| w.value(delta * i as f64 / 2000.0))
            .fold(f64::INFINITY, f64::min)
    };
    let ok = |delta: f64| {
        let v = w.value(delta);
        v > 0.0 && v < HARD_CORE_ENERGY && grid_min(delta) >= 0.5 * v
    };
    if w.is_hard_core() {
        return Err(Error::Unsupported(
            "hard cores have no finite half-height; use a soft core for the split".into(),
        ));
    }
    let delta = if ok(cap) {
        cap
    } else {
        let mut lo = cap;
        let mut found = false;
        for _ in 0..200 {
            lo *= 0.9;
            if ok(lo) {
                found = true;
                break;
            }
        }
        if !found {
            return Err(Error::Unsupported("no positive core found below r0".into()));
        }
        bisect_last_true(ok, lo, cap, 1e-12)
    };
    let a = 0.5 * w.value(delta);
    Ok(RepulsiveSplit { potential: w.clone(), a, delta, rule })
}

/// Radial tail bound `phi(r) = B (1 + r)^{-s}`; `B = 0` is the zero function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailFunction {
    pub b: f64,
    pub s: f64,
}

impl TailFunction {
    pub fn new(b: f64, s: f64) -> Self {
        Self { b, s }
    }

    pub fn zero() -> Self {
        Self { b: 0.0, s: f64::INFINITY }
    }

    pub fn is_zero(&self) -> bool {
        self.b == 0.0
    }

    pub fn phi(&self, r: f64) -> f64 {
        if self.b == 0.0 {
            0.0
        } else {
            self.b * (1.0 + r.abs()).powf(-self.s)
        }
    }

    /// `∫_a^∞ phi`.
    fn integral_from(&self, a: f64) -> f64 {
        if self.b == 0.0 {
            0.0
        } else {
            self.b * (1.0 + a).powf(1.0 - self.s) / (self.s - 1.0)
        }
    }

    /// Smallest amplitude with `phi(r) >= -f(r)` on `grid`.
    pub fn fit_amplitude<R: Radial + ?Sized>(f: &R, s: f64, grid: &[f64]) -> Self {
        let b = grid
            .iter()
            .map(|&r| (-f.at(r)).max(0.0) * (1.0 + r).powf(s))
            .fold(0.0, f64::max);
        Self { b, s }
    }
}

impl Radial for TailFunction {
    fn at(&self, r: f64) -> f64 {
        self.phi(r)
    }
}

/// Sum with a certified bound on the omitted remainder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertifiedSum {
    pub value: f64,
    pub remainder: f64,
}

/// `S = Σ_{i≠0} phi(δ_{0i})` over the unit-cube lattice, where `δ_{0i}` is the
/// distance between the cubes `C_0` and `C_i`.
pub fn lattice_tail_sum(phi: &TailFunction, d: usize) -> Result<CertifiedSum> {
    if phi.is_zero() {
        return Ok(CertifiedSum { value: 0.0, remainder: 0.0 });
    }
    if phi.s <= d as f64 {
        return Err(Error::Divergence(format!("tail exponent {} <= dimension {d}", phi.s)));
    }
    if d == 1 {
        // Σ_{i≠0} phi(δ) = 2 Σ_{k>=0} phi(k); tail bracketed by integrals.
        let mut partial = 0.0;
        let mut k = 0usize;
        loop {
            partial += phi.phi(k as f64);
            k += 1;
            let lower = phi.integral_from(k as f64);
            let upper = phi.integral_from(k as f64 - 1.0);
            let half = 0.5 * (upper - lower);
            if (half <= 1e-10 * partial && k > 8) || k > 50_000_000 {
                let value = 2.0 * (partial + 0.5 * (upper + lower));
                return Ok(CertifiedSum { value, remainder: 2.0 * half });
            }
        }
    }
    // Multiplicity per axis of the gap m = max(|i|-1, 0): 3 for m = 0, 2 otherwise.
    let mut partial = 0.0;
    let mut k = 0usize;
    let mut idx = vec![0usize; d];
    loop {
        // shell |m|_∞ = k
        let mut shell = 0.0;
        let count = (k + 1).pow(d as u32);
        for flat in 0..count {
            let mut f = flat;
            let mut on_shell = false;
            for slot in idx.iter_mut() {
                *slot = f % (k + 1);
                f /= k + 1;
                if *slot == k {
                    on_shell = true;
                }
            }
            if !on_shell {
                continue;
            }
            let mult: f64 = idx.iter().map(|&m| if m == 0 { 3.0 } else { 2.0 }).product();
            let r = (idx.iter().map(|&m| (m * m) as f64).sum::<f64>()).sqrt();
            shell += mult * phi.phi(r);
        }
        if k == 0 {
            shell -= phi.phi(0.0);
        }
        partial += shell;
        k += 1;
        // Σ_{|m|_∞ >= k} ≤ 2^d d Σ_{j>=k} (j+1)^{d-1} phi(j) ≤ 2^d d 2^{d-1} ∫_{k-1}^∞ (1+t)^{d-1} phi(t) dt
        let rem = 2f64.powi(d as i32) * d as f64 * 2f64.powi(d as i32 - 1) * phi.b * (k as f64).powf(d as f64 - phi.s)
            / (phi.s - d as f64);
        let work = (k + 1).pow(d as u32);
        if rem <= 2e-8 * partial || work > 40_000_000 {
            return Ok(CertifiedSum { value: partial + 0.5 * rem, remainder: 0.5 * rem });
        }
    }
}

/// Increasing scale function `psi >= 1` used by the Ruelle construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum ScaleFunction {
    /// `psi(l) = max(l, 1)^exponent`
    Power { exponent: f64 },
    /// `psi(l) = ln(e + l)`
    Log,
}

impl ScaleFunction {
    pub fn value(&self, l: f64) -> f64 {
        match self {
            ScaleFunction::Power { exponent } => l.max(1.0).powf(*exponent),
            ScaleFunction::Log => (std::f64::consts::E + l.max(0.0)).ln(),
        }
    }

    /// An exponent `eta` with `psi(l) <= psi(n) (l/n)^eta` for all `l >= n`.
    pub fn growth_exponent(&self, n: f64) -> f64 {
        match self {
            ScaleFunction::Power { exponent } => *exponent,
            ScaleFunction::Log => 1.0 / (std::f64::consts::E + n).ln(),
        }
    }
}

/// `I(l0) = Σ_{l >= l0} l^d psi(l) (phi(l) - phi(l+1))` with a certified remainder.
pub fn tail_series_i(phi: &TailFunction, psi: &ScaleFunction, ell0: u64, d: usize) -> Result<CertifiedSum> {
    if ell0 < 2 {
        return arg("ell0 must be at least 2");
    }
    let report = crate::ruelle::validate_psi(psi, phi, d, 10_000);
    if !report.pass {
        return Err(Error::Admissibility(report.reason));
    }
    if phi.is_zero() {
        return Ok(CertifiedSum { value: 0.0, remainder: 0.0 });
    }
    let df = d as f64;
    let mut partial = 0.0;
    let mut l = ell0;
    loop {
        let lf = l as f64;
        partial += lf.powf(df) * psi.value(lf) * (phi.phi(lf) - phi.phi(lf + 1.0));
        l += 1;
        let n = l as f64;
        let eta = psi.growth_exponent(n);
        let e = df + eta - phi.s;
        if e < 0.0 {
            // term(l) <= B s psi(n) n^{-eta} (1+l)^{d+eta-s-1} for l >= n
            let rem = phi.b * phi.s * psi.value(n) * n.powf(-eta) * (1.0 + n - 1.0).powf(e) / (-e);
            if rem <= 1e-10 * partial.max(1e-300) || l - ell0 > 200_000 {
                return Ok(CertifiedSum { value: partial, remainder: rem });
            }
        } else if l - ell0 > 2_000_000 {
            return Err(Error::Divergence("I(l0) tail not certified".into()));
        }
    }
}

/// Integral helper shared with tests: `∫_a^∞ dr/(1+r^s)`.
pub fn tail_integral(a: f64, s: f64) -> f64 {
    power_tail_integral(a, 0.0, s)
}
