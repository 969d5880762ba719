//! Finite-volume thermodynamics: `g_T(μ, L) = -T log Z / L^d`, its Legendre
//! dual `f_T(ρ, L)`, the inverse `μ_L(ρ)`, extrapolation to infinite volume
//! and closed-form bound evaluators.
//!
//! Every constant the bounds carry is a caller parameter. The evaluators
//! transcribe the formulas and never fit anything themselves.

use crate::configuration::SimBox;
use crate::error::{arg, Error, Result};
use crate::geometry::{eps_ell, eta_ell};
use crate::gibbs::{
    gcmc_log_partition, gcmc_run_with, ground_state, EnsembleSpec, ExactOptions, GcmcOptions, OccupancyTable,
};
use crate::lda::DensityProfile;
use crate::numerics::{linear_fit, neg, pos, Estimate};
use crate::potentials::PairPotential;
use crate::ruelle::{xi, XiParams};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Exact,
    Gcmc,
    GroundState,
    Analytic,
    Transform,
}

/// `G` samples `(μ, g)`, `F` samples `(ρ, f)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveKind {
    G,
    F,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveSample {
    pub x: f64,
    pub value: f64,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreeEnergyCurve {
    pub t: f64,
    /// Box side; `∞` for thermodynamic-limit curves.
    pub l: f64,
    pub kind: CurveKind,
    pub provenance: Provenance,
    pub samples: Vec<CurveSample>,
}

/// Largest violation of concavity (`G`) or convexity (`F`) in units of the
/// local error bars.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeCheck {
    pub worst_excess: f64,
    pub ok: bool,
}

impl FreeEnergyCurve {
    pub fn new(t: f64, l: f64, kind: CurveKind, provenance: Provenance, samples: Vec<CurveSample>) -> Result<Self> {
        if samples.len() < 2 {
            return arg("a curve needs at least two samples");
        }
        if samples.windows(2).any(|w| !(w[1].x > w[0].x)) {
            return arg("curve abscissae must be strictly increasing");
        }
        if samples.iter().any(|s| !s.value.is_finite()) {
            return arg("curve values must be finite");
        }
        Ok(Self { t, l, kind, provenance, samples })
    }

    pub fn xs(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.x).collect()
    }

    fn slopes(&self) -> Vec<f64> {
        self.samples.windows(2).map(|w| (w[1].value - w[0].value) / (w[1].x - w[0].x)).collect()
    }

    /// Discrete second differences against `2×` the adjacent error bars.
    pub fn shape_check(&self) -> ShapeCheck {
        let sign = match self.kind {
            CurveKind::G => 1.0,
            CurveKind::F => -1.0,
        };
        let mut worst = 0.0f64;
        for w in self.samples.windows(3) {
            let (a, b, c) = (w[0], w[1], w[2]);
            let t = (b.x - a.x) / (c.x - a.x);
            // Chord value at b minus b: positive means b lies below the chord.
            let chord = a.value + t * (c.value - a.value) - b.value;
            let slack = 2.0 * (a.error + b.error + c.error) + 1e-12 * (1.0 + b.value.abs());
            worst = worst.max((sign * chord) - slack);
        }
        ShapeCheck { worst_excess: worst, ok: worst <= 0.0 }
    }

    /// Concave (`G`) or convex (`F`) hull; the flag reports whether any value
    /// moved by more than `1e-6`.
    pub fn hull(&self) -> (Self, bool) {
        let sign = match self.kind {
            CurveKind::G => -1.0,
            CurveKind::F => 1.0,
        };
        // Lower convex hull of (x, sign·y).
        let pts: Vec<(f64, f64)> = self.samples.iter().map(|s| (s.x, sign * s.value)).collect();
        let mut hull: Vec<usize> = Vec::new();
        for i in 0..pts.len() {
            while hull.len() >= 2 {
                let (o, a) = (pts[hull[hull.len() - 2]], pts[hull[hull.len() - 1]]);
                let cross = (a.0 - o.0) * (pts[i].1 - o.1) - (a.1 - o.1) * (pts[i].0 - o.0);
                if cross <= 0.0 {
                    hull.pop();
                } else {
                    break;
                }
            }
            hull.push(i);
        }
        let mut out = self.clone();
        let mut changed = false;
        let mut seg = 0;
        for (i, s) in out.samples.iter_mut().enumerate() {
            while seg + 1 < hull.len() - 1 && hull[seg + 1] <= i {
                seg += 1;
            }
            let (a, b) = (pts[hull[seg]], pts[hull[(seg + 1).min(hull.len() - 1)]]);
            let v = if b.0 > a.0 { a.1 + (s.x - a.0) * (b.1 - a.1) / (b.0 - a.0) } else { a.1 };
            let v = sign * v;
            if (v - s.value).abs() > 1e-6 {
                changed = true;
            }
            s.value = v;
        }
        (out, changed)
    }

    /// Piecewise-linear interpolation; `None` outside the sampled range.
    pub fn eval(&self, x: f64) -> Option<f64> {
        let s = &self.samples;
        if x < s[0].x || x > s[s.len() - 1].x {
            return None;
        }
        let i = s.partition_point(|p| p.x <= x).clamp(1, s.len() - 1);
        let (a, b) = (s[i - 1], s[i]);
        Some(a.value + (x - a.x) * (b.value - a.value) / (b.x - a.x))
    }

    /// Linear-interpolation error bound per segment: `Δx · |Δslope| / 2`
    /// against the neighbouring segments.
    pub fn interpolation_bound(&self) -> f64 {
        let sl = self.slopes();
        let mut worst = 0.0f64;
        for i in 0..sl.len() {
            let dx = self.samples[i + 1].x - self.samples[i].x;
            let left = if i > 0 { (sl[i] - sl[i - 1]).abs() } else { 0.0 };
            let right = if i + 1 < sl.len() { (sl[i + 1] - sl[i]).abs() } else { 0.0 };
            worst = worst.max(0.5 * dx * left.max(right));
        }
        worst
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let head = match self.kind {
            CurveKind::G => ["mu", "g", "err"],
            CurveKind::F => ["rho", "f", "err"],
        };
        w.write_record(head).map_err(|e| Error::Argument(e.to_string()))?;
        for s in &self.samples {
            w.write_record(&[format!("{:?}", s.x), format!("{:?}", s.value), format!("{:?}", s.error)])
                .map_err(|e| Error::Argument(e.to_string()))?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| Error::Argument(e.to_string()))?).unwrap())
    }
}

/// Direction of a discrete Legendre–Fenchel transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LegendreDirection {
    /// `g(μ) = inf_ρ {f(ρ) - μρ}`
    FToG,
    /// `f(ρ) = sup_μ {μρ + g(μ)}`
    GToF,
}

/// Transform on an automatic grid spanning the dual slopes of the input,
/// with as many points as the input.
pub fn legendre(curve: &FreeEnergyCurve, direction: LegendreDirection) -> Result<FreeEnergyCurve> {
    let sl = curve.slopes();
    let (lo, hi) = sl.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), s| (l.min(*s), h.max(*s)));
    let (lo, hi) = match direction {
        LegendreDirection::FToG => (lo, hi),
        LegendreDirection::GToF => (-hi, -lo),
    };
    let n = curve.samples.len();
    let grid: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
    legendre_on(curve, direction, &grid)
}

/// Transform evaluated at the given dual abscissae. The extremum of a linear
/// function over the piecewise-linear interpolant is attained at a sample.
pub fn legendre_on(curve: &FreeEnergyCurve, direction: LegendreDirection, grid: &[f64]) -> Result<FreeEnergyCurve> {
    if curve.samples.len() < 16 {
        return arg("a Legendre transform needs at least 16 samples");
    }
    if grid.len() < 2 {
        return arg("need at least two output points");
    }
    let err = curve.samples.iter().map(|s| s.error).fold(0.0, f64::max) + curve.interpolation_bound();
    let out: Vec<CurveSample> = grid
        .iter()
        .map(|&y| {
            let value = match direction {
                LegendreDirection::GToF => {
                    curve.samples.iter().map(|s| s.x * y + s.value).fold(f64::NEG_INFINITY, f64::max)
                }
                LegendreDirection::FToG => curve.samples.iter().map(|s| s.value - y * s.x).fold(f64::INFINITY, f64::min),
            };
            CurveSample { x: y, value, error: err }
        })
        .collect();
    let kind = match direction {
        LegendreDirection::GToF => CurveKind::F,
        LegendreDirection::FToG => CurveKind::G,
    };
    FreeEnergyCurve::new(curve.t, curve.l, kind, Provenance::Transform, out)
}

/// How finite-volume quantities are computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Method {
    Exact(ExactOptions),
    /// Chains with the given options; `log Z` by integration over `nodes`
    /// activity values.
    Gcmc { options: GcmcOptions, nodes: usize },
}

/// A box, interaction and temperature with a chosen backend; the exact
/// backend enumerates once and reweights for every `μ`.
pub struct FiniteVolume {
    pub t: f64,
    pub domain: SimBox,
    pub potential: PairPotential,
    pub method: Method,
    table: Option<(OccupancyTable, Option<OccupancyTable>)>,
}

impl FiniteVolume {
    pub fn new(t: f64, domain: SimBox, potential: PairPotential, method: Method) -> Result<Self> {
        if !(t > 0.0) {
            return Err(Error::Unsupported("finite-volume curves need T > 0; use ground_state at T = 0".into()));
        }
        let table = match &method {
            Method::Exact(o) => {
                let fine = OccupancyTable::build(&domain, &potential, 1.0 / t, o.panels, o.order, o.n_max)?;
                let coarse = if o.error_estimate && o.order > 1 {
                    Some(OccupancyTable::build(&domain, &potential, 1.0 / t, o.panels, o.order - 1, o.n_max)?)
                } else {
                    None
                };
                Some((fine, coarse))
            }
            Method::Gcmc { .. } => None,
        };
        Ok(Self { t, domain, potential, method, table })
    }

    fn spec(&self, mu: f64) -> EnsembleSpec {
        EnsembleSpec::chemical(self.t, mu, self.domain.clone(), self.potential.clone())
    }

    pub fn volume(&self) -> f64 {
        self.domain.volume()
    }

    /// Truncation tail for the exact backend, relative to `Z`.
    fn tail(&self, mu: f64, n_max: usize, log_z: f64) -> f64 {
        let beta = 1.0 / self.t;
        let x = (beta * (mu + self.potential.stability_bound())).exp() * self.volume();
        let n1 = (n_max + 1) as f64;
        if x >= n1 + 1.0 {
            return f64::INFINITY;
        }
        (n1 * x.ln() - crate::numerics::ln_factorial(n_max + 1) - log_z).exp() / (1.0 - x / (n1 + 1.0))
    }

    /// `g_T(μ, L) = -T log Z / L^d`.
    pub fn g(&self, mu: f64) -> Result<Estimate> {
        let v = self.volume();
        match (&self.method, &self.table) {
            (Method::Exact(o), Some((fine, coarse))) => {
                let m = fine.evaluate(&vec![mu / self.t; fine.bins()]);
                let qerr = coarse.as_ref().map(|c| (c.evaluate(&vec![mu / self.t; c.bins()]).log_z - m.log_z).abs());
                let err = qerr.unwrap_or(0.0) + self.tail(mu, o.n_max, m.log_z);
                Ok(Estimate::new(-self.t * m.log_z / v, self.t * err / v))
            }
            (Method::Gcmc { options, nodes }, _) => {
                let lz = gcmc_log_partition(&self.spec(mu), options, *nodes)?;
                Ok(Estimate::new(-self.t * lz.value / v, self.t * lz.error / v))
            }
            _ => unreachable!(),
        }
    }

    /// `⟨n⟩ / L^d`.
    pub fn density(&self, mu: f64) -> Result<Estimate> {
        let v = self.volume();
        match (&self.method, &self.table) {
            (Method::Exact(_), Some((fine, coarse))) => {
                let n = fine.evaluate(&vec![mu / self.t; fine.bins()]).mean_n();
                let err = coarse.as_ref().map(|c| (c.evaluate(&vec![mu / self.t; c.bins()]).mean_n() - n).abs());
                Ok(Estimate::new(n / v, err.unwrap_or(0.0) / v))
            }
            (Method::Gcmc { options, .. }, _) => {
                let st = gcmc_run_with(&self.spec(mu), options)?;
                Ok(Estimate::new(st.n.value / v, st.n.error / v))
            }
            _ => unreachable!(),
        }
    }

    /// `μ_L(ρ)` by monotone bisection; the bracket doubles outward up to 60
    /// times until the density straddles `ρ`.
    pub fn mu_of_rho(&self, rho: f64, bracket: (f64, f64)) -> Result<f64> {
        if !(rho > 0.0) {
            return arg("density must be positive");
        }
        if let Method::Exact(o) = &self.method {
            if rho * self.volume() >= o.n_max as f64 {
                return Err(Error::Infeasible(format!(
                    "density {rho} needs more than the truncation n_max = {} particles",
                    o.n_max
                )));
            }
        }
        let (mut lo, mut hi) = bracket;
        if !(hi > lo) {
            return arg("bracket must be increasing");
        }
        let mut width = hi - lo;
        let mut tries = 0;
        while self.density(lo)?.value > rho {
            lo -= width;
            width *= 2.0;
            tries += 1;
            if tries > 60 {
                return Err(Error::Infeasible("no lower bracket for the chemical potential".into()));
            }
        }
        width = hi - lo;
        tries = 0;
        while self.density(hi)?.value < rho {
            hi += width;
            width *= 2.0;
            tries += 1;
            if tries > 60 {
                return Err(Error::Infeasible("no upper bracket for the chemical potential".into()));
            }
        }
        let exact = matches!(self.method, Method::Exact(_));
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let est = self.density(mid)?;
            let done = if exact {
                (est.value - rho).abs() < 1e-9 * rho || hi - lo < 1e-14 * (1.0 + mid.abs())
            } else {
                (est.value - rho).abs() < est.error || hi - lo < 1e-6
            };
            if done {
                return Ok(mid);
            }
            if est.value < rho {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    /// `f_T(ρ, L) = μ_L(ρ)ρ + g_T(μ_L(ρ), L)`.
    pub fn f(&self, rho: f64, bracket: (f64, f64)) -> Result<(f64, Estimate)> {
        if rho == 0.0 {
            return Ok((f64::NEG_INFINITY, Estimate::exact(0.0)));
        }
        let mu = self.mu_of_rho(rho, bracket)?;
        let g = self.g(mu)?;
        Ok((mu, Estimate::new(mu * rho + g.value, g.error)))
    }

    pub fn g_curve(&self, mus: &[f64]) -> Result<FreeEnergyCurve> {
        let vals: Vec<Result<Estimate>> = mus.par_iter().map(|m| self.g(*m)).collect();
        let samples = mus
            .iter()
            .zip(vals)
            .map(|(m, v)| v.map(|e| CurveSample { x: *m, value: e.value, error: e.error }))
            .collect::<Result<Vec<_>>>()?;
        let prov = match self.method {
            Method::Exact(_) => Provenance::Exact,
            Method::Gcmc { .. } => Provenance::Gcmc,
        };
        FreeEnergyCurve::new(self.t, self.domain.lengths[0], CurveKind::G, prov, samples)
    }
}

/// `g_T(μ, L)` of a cube ensemble; `T = 0` routes to the ground state.
pub fn g_of_mu(spec: &EnsembleSpec, method: &Method) -> Result<Estimate> {
    let mu = match spec.field {
        crate::gibbs::Field::Chemical { mu } => mu,
        _ => return arg("g_of_mu takes a chemical potential"),
    };
    if spec.t == 0.0 {
        return Err(Error::Unsupported("T = 0 has no partition function; use g_of_mu_ground".into()));
    }
    FiniteVolume::new(spec.t, spec.domain.clone(), spec.potential.clone(), method.clone())?.g(mu)
}

/// `min_n min_x {H - μn} / L^d` at zero temperature.
pub fn g_of_mu_ground(spec: &EnsembleSpec, n_max: usize, restarts: usize, seed: u64) -> Result<f64> {
    Ok(ground_state(spec, n_max, restarts, seed)?.value / spec.domain.volume())
}

/// `ε_ℓ` and `η_ℓ` for a tail exponent, with the fitted constant of a
/// finite-size extrapolation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateModel {
    pub s: f64,
    pub d: usize,
    pub fitted_c: f64,
    pub fit_residual: f64,
}

impl RateModel {
    pub fn new(s: f64, d: usize) -> Self {
        Self { s, d, fitted_c: f64::NAN, fit_residual: f64::NAN }
    }

    pub fn eps(&self, ell: f64) -> f64 {
        eps_ell(self.s, self.d, ell)
    }

    pub fn eta(&self, ell: f64) -> f64 {
        eta_ell(self.s, self.d, ell)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extrapolation {
    pub limit: f64,
    pub fitted_c: f64,
    /// Largest absolute residual of the fit.
    pub residual: f64,
    /// `residual / max |value - limit|`.
    pub relative_residual: f64,
    /// The residual exceeds five times the propagated errors.
    pub refused: bool,
}

/// Weighted least squares of `value(ℓ) = limit + C ε_ℓ`.
pub fn extrapolate_limit(values: &[(f64, Estimate)], rate: &RateModel) -> Result<Extrapolation> {
    let mut ells: Vec<f64> = values.iter().map(|v| v.0).collect();
    ells.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ells.dedup();
    if ells.len() < 4 {
        return arg("extrapolation needs at least four distinct lengths");
    }
    let x: Vec<f64> = values.iter().map(|v| rate.eps(v.0)).collect();
    let y: Vec<f64> = values.iter().map(|v| v.1.value).collect();
    let errs: Vec<f64> = values.iter().map(|v| v.1.error).collect();
    let floor = errs.iter().cloned().fold(0.0, f64::max);
    let w: Vec<f64> = if floor > 0.0 {
        errs.iter().map(|e| 1.0 / e.max(1e-6 * floor).powi(2)).collect()
    } else {
        vec![1.0; errs.len()]
    };
    let (limit, c) = linear_fit(&x, &y, &w);
    let residual = x.iter().zip(&y).map(|(x, y)| (y - limit - c * x).abs()).fold(0.0, f64::max);
    let spread = y.iter().map(|y| (y - limit).abs()).fold(0.0, f64::max);
    Ok(Extrapolation {
        limit,
        fitted_c: c,
        residual,
        relative_residual: if spread > 0.0 { residual / spread } else { 0.0 },
        refused: residual > 5.0 * floor + 1e-12 * (1.0 + limit.abs()),
    })
}

/// `1 + max(1, α/d)`.
pub fn gamma(alpha: f64, d: usize) -> f64 {
    1.0 + (alpha / d as f64).max(1.0)
}

/// Constants of the density and chemical-potential bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    pub kappa: f64,
    pub r0: f64,
    pub alpha: f64,
    pub d: usize,
    /// Upper-bound constant `C`.
    pub c_upper: f64,
    /// Lower-bound constant `c`.
    pub c_lower: f64,
}

impl BoundParams {
    pub fn gamma(&self) -> f64 {
        gamma(self.alpha, self.d)
    }

    fn log_branch(&self) -> bool {
        self.alpha == self.d as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lower: f64,
    pub upper: f64,
}

fn t_log(t: f64, rho: f64) -> f64 {
    if t == 0.0 {
        0.0
    } else {
        t * rho.ln()
    }
}

fn t_rho_log(t: f64, rho: f64) -> f64 {
    if rho == 0.0 || t == 0.0 {
        0.0
    } else {
        t * rho * rho.ln()
    }
}

/// Upper and lower bounds on `f_T(ρ, L)`, uniform in `L`.
pub fn bound_f(rho: f64, t: f64, p: &BoundParams) -> Bounds {
    let (k, c, cl, g) = (p.kappa, p.c_upper, p.c_lower, p.gamma());
    let rd = p.r0.powi(p.d as i32);
    let ent = t_rho_log(t, rho);
    if p.log_branch() {
        let upper = c * k * rd * rho * rho * pos((rd * rho).ln()) + c * k * (1.0 + rd) * rho * rho + c * t * rho + ent;
        let lower = cl / k * rd * rho * rho * pos((rd * rho / (2.0 * (p.d as f64).sqrt())).ln()) - (k + t) * rho + ent;
        Bounds { lower, upper }
    } else {
        let rg = p.r0.powf(p.d as f64 * (g - 1.0));
        let upper = c * k * rg * rho.powf(g) + c * k * rho * rho + c * t * rho + ent;
        let lower = cl / k * rg * rho.powf(g) - (k + cl / k + t) * rho + ent;
        Bounds { lower, upper }
    }
}

/// Upper and lower bounds on `μ_L(ρ)`.
pub fn bound_mu(rho: f64, t: f64, p: &BoundParams) -> Bounds {
    let (k, c, cl, g) = (p.kappa, p.c_upper, p.c_lower, p.gamma());
    let rd = p.r0.powi(p.d as i32);
    let lg = t_log(t, rho);
    if p.log_branch() {
        let upper = c * k * rd * rho * pos((rd * rho).ln()) + c * k * (1.0 + rd) * rho + k + c * t + lg;
        let lower = cl / k * rd * rho * pos((rd * rho / (2.0 * (p.d as f64).sqrt())).ln()) - k - t + lg;
        Bounds { lower, upper }
    } else {
        let rg = p.r0.powf(p.d as f64 * (g - 1.0));
        let upper = c * k * rg * rho.powf(g - 1.0) + c * k * rho + c * (k + 1.0 / k + t) + lg;
        let lower = cl / k * rg * rho.powf(g - 1.0) - k - cl / k - t + lg;
        Bounds { lower, upper }
    }
}

/// Constants of the grand-canonical bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GcParams {
    pub k: f64,
    pub c: f64,
    pub gamma: f64,
    /// The `α = d` form with the logarithmic correction.
    pub log_branch: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GcBounds {
    pub lower: f64,
    pub upper: f64,
    /// `T = 0`: the exponential terms were taken as their limit.
    pub zero_temperature: bool,
}

/// `-T e^{-x_-/T}`, continuous at `T = 0`.
fn exp_term(t: f64, x: f64) -> f64 {
    if t == 0.0 {
        0.0
    } else {
        -t * (-neg(x) / t).exp()
    }
}

/// Bounds on `g_T(μ, L)`.
pub fn bound_g(mu: f64, t: f64, p: &GcParams) -> GcBounds {
    let power = |x: f64| {
        if p.log_branch {
            x * x / (2.0 + x).ln()
        } else {
            x.powf(p.gamma / (p.gamma - 1.0))
        }
    };
    let lower = -p.k * power(pos(mu + p.c)) + exp_term(t, mu + p.c);
    let upper = -power(pos(mu - p.c)) / (p.k * (1.0 + t)) + exp_term(t, mu - p.c);
    GcBounds { lower, upper, zero_temperature: t == 0.0 }
}

/// Constants of the universal bounds on `G_T[ρ]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniversalParams {
    pub kappa: f64,
    pub c: f64,
    pub alpha: f64,
    /// `C_M` of the bound for densities below `M`.
    pub c_m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniversalBounds {
    pub lower: f64,
    pub upper: f64,
    pub upper_simple: f64,
}

pub fn universal_g_bounds(profile: &DensityProfile, t: f64, p: &UniversalParams) -> UniversalBounds {
    let mass = profile.mass();
    let ent = t * profile.entropy();
    let d = profile.d();
    let lower = -(p.kappa + t) * mass + ent;
    let core = if p.alpha == d as f64 {
        profile.integral(|r| if r > 0.0 { r * r * pos(r.ln()) } else { 0.0 })
    } else {
        let g = gamma(p.alpha, d);
        profile.integral(|r| r.powf(g))
    };
    UniversalBounds { lower, upper: p.c * core + p.c * (1.0 + t) * mass + ent, upper_simple: p.c_m * mass + ent }
}

/// Additive error budget `RHS - G_T[ρ1]` of the sub-additivity estimate.
pub fn subadditivity_rhs(
    rho1: &DensityProfile,
    rho2: &DensityProfile,
    eps: f64,
    t: f64,
    c: f64,
    alpha: f64,
) -> Result<f64> {
    if !(eps > 0.0 && eps <= 0.5) {
        return arg("eps must lie in (0, 1/2]");
    }
    if rho1.shape != rho2.shape || rho1.h != rho2.h || rho1.origin != rho2.origin {
        return arg("both densities must share one grid");
    }
    let d = rho1.d();
    let le = neg(eps.ln());
    let m2 = rho2.mass();
    let ent2 = t * rho2.entropy();
    if alpha == d as f64 {
        let sq_log = |r: f64| if r > 0.0 { r * r * pos(r.ln()) } else { 0.0 };
        Ok(c * eps * rho1.integral(sq_log)
            + rho1.mass()
            + c / eps * rho2.integral(sq_log)
            + c * le / eps * rho2.integral(|r| r * r)
            + c * le * m2
            + ent2)
    } else {
        let g = gamma(alpha, d);
        Ok(c * eps * rho1.integral(|r| r.powf(g) + r) + c / eps.powf(g - 1.0) * rho2.integral(|r| r.powf(g)) + c * le * m2 + ent2)
    }
}

/// Constants of the fixed-density rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateParams {
    pub c: f64,
    pub s: f64,
    pub d: usize,
    pub gamma: f64,
    /// Smallest `ℓ` treated as large; reported with every evaluation.
    pub ell_min: f64,
}

/// `ξ(ρ) η_ℓ`.
pub fn fixed_density_rate(rho: f64, t: f64, ell: f64, p: &RateParams) -> Result<f64> {
    if ell < p.ell_min {
        return arg(format!("ℓ = {ell} is below the large-ℓ threshold {}", p.ell_min));
    }
    let sd = p.s - p.d as f64;
    if t == 0.0 && sd <= 1.0 {
        return Err(Error::Unsupported("the zero-temperature rate needs s > d + 1".into()));
    }
    let eps = sd.min(1.0) / 2.0;
    let rg = if p.gamma == 2.0 { rho * (2.0 + rho).ln() } else { rho.powf(p.gamma - 1.0) };
    let xi_rho = if t > 0.0 {
        p.c * rho * (p.c * rg).exp()
    } else {
        p.c * rho.sqrt() * (1.0 + rg).powf(2.0 + 2.0 * p.d as f64 / eps)
    };
    Ok(xi_rho * eta_ell(p.s, p.d, ell))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftedMu {
    /// `μ` shifted down: the upper bound on `G/ℓ^d` is `g(mu_minus)`.
    pub mu_minus: f64,
    /// `μ` shifted up: the lower bound on `G/ℓ^d` is `g(mu_plus)`.
    pub mu_plus: f64,
}

/// Chemical potentials sandwiching the finite-volume free energy.
pub fn shifted_mu_rate(mu: f64, t: f64, ell: f64, xi_params: &XiParams, c: f64, s: f64, d: usize, ell_min: f64) -> Result<ShiftedMu> {
    if ell < ell_min {
        return arg(format!("ℓ = {ell} is below the large-ℓ threshold {ell_min}"));
    }
    let e = eps_ell(s, d, ell);
    let x = xi(t, mu, d, xi_params);
    if t > 0.0 {
        let shift = c * (1.0 + x * x) * e;
        Ok(ShiftedMu { mu_minus: mu - shift, mu_plus: mu + shift })
    } else {
        let sd = s - d as f64;
        Ok(ShiftedMu { mu_minus: mu - c * x * e, mu_plus: mu + c * x / ell.powf(sd / (sd + 1.0)) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn ideal_box(l: f64) -> FiniteVolume {
        let o = ExactOptions { n_max: 40, order: 1, panels: 1, error_estimate: false };
        FiniteVolume::new(1.0, SimBox::interval(0.0, l), PairPotential::zero(), Method::Exact(o)).unwrap()
    }

    fn soft_box() -> FiniteVolume {
        let o = ExactOptions { n_max: 8, order: 5, panels: 4, error_estimate: true };
        FiniteVolume::new(1.0, SimBox::interval(0.0, 1.0), PairPotential::soft_core(0.3, 6.0), Method::Exact(o)).unwrap()
    }

    #[test]
    fn ideal_gas_closed_forms() {
        let fv = ideal_box(1.0);
        assert_abs_diff_eq!(fv.g(0.0).unwrap().value, -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fv.g(2f64.ln()).unwrap().value, -2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fv.mu_of_rho(1.0, (-1.0, 1.0)).unwrap(), 0.0, epsilon = 1e-8);
        assert_abs_diff_eq!(fv.mu_of_rho(2.0, (5.0, 6.0)).unwrap(), 2f64.ln(), epsilon = 1e-8);
        assert_abs_diff_eq!(fv.f(1.0, (-1.0, 1.0)).unwrap().1.value, -1.0, epsilon = 1e-8);
        assert_abs_diff_eq!(fv.f(2.0, (-1.0, 1.0)).unwrap().1.value, 2.0 * 2f64.ln() - 2.0, epsilon = 1e-8);
        let spec = EnsembleSpec::chemical(1.0, 0.0, SimBox::interval(0.0, 1.0), PairPotential::zero());
        assert!(matches!(g_of_mu(&EnsembleSpec { t: 0.0, ..spec.clone() }, &fv.method), Err(Error::Unsupported(_))));
    }

    #[test]
    fn soft_core_g_matches_exact_partition() {
        let fv = soft_box();
        let spec = EnsembleSpec::chemical(1.0, 0.4, SimBox::interval(0.0, 1.0), PairPotential::soft_core(0.3, 6.0));
        let ex = crate::gibbs::exact_partition_with(&spec, &ExactOptions { n_max: 8, order: 5, panels: 4, error_estimate: false }).unwrap();
        assert_abs_diff_eq!(fv.g(0.4).unwrap().value, -ex.log_z, epsilon = 1e-12);
        // Fixed-point recheck of the inverse.
        let mu = fv.mu_of_rho(1.0, (-1.0, 0.0)).unwrap();
        assert!((fv.density(mu).unwrap().value - 1.0).abs() < 1e-6);
    }

    #[test]
    fn fenchel_young_and_literal_sup() {
        let fv = soft_box();
        let (mu_star, f) = fv.f(1.2, (-1.0, 1.0)).unwrap();
        let mut rng_mu = 0.123f64;
        for _ in 0..20 {
            rng_mu = (rng_mu * 7.13 + 0.31).fract();
            let mu = -4.0 + 8.0 * rng_mu;
            assert!(f.value >= mu * 1.2 + fv.g(mu).unwrap().value - 1e-10);
        }
        let grid: Vec<f64> = (0..200).map(|i| -3.0 + 6.0 * i as f64 / 199.0).collect();
        let sup = grid.iter().map(|m| m * 1.2 + fv.g(*m).unwrap().value).fold(f64::NEG_INFINITY, f64::max);
        assert!(f.value >= sup - 1e-10);
        // Curvature times half the squared grid step bounds the gap.
        assert!(f.value - sup < 0.5 * (6.0f64 / 199.0).powi(2) * 5.0, "{} {} {mu_star}", f.value, sup);
    }

    #[test]
    fn curves_have_the_right_shape() {
        let fv = soft_box();
        let mus: Vec<f64> = (0..24).map(|i| -3.0 + 0.25 * i as f64).collect();
        let g = fv.g_curve(&mus).unwrap();
        assert!(g.shape_check().ok);
        assert!(g.samples.iter().all(|s| s.value <= 0.0));
        let f = legendre(&g, LegendreDirection::GToF).unwrap();
        assert!(f.shape_check().ok);
        // Round trip reproduces g within twice the interpolation bounds.
        let back = legendre_on(&f, LegendreDirection::FToG, &mus[4..20]).unwrap();
        let tol = 2.0 * (g.interpolation_bound() + f.interpolation_bound());
        for (b, s) in back.samples.iter().zip(&g.samples[4..20]) {
            assert!((b.value - s.value).abs() <= tol, "{} vs {} tol {tol}", b.value, s.value);
        }
    }

    #[test]
    fn legendre_examples() {
        let g: Vec<CurveSample> = (0..=600)
            .map(|i| {
                let mu = -3.0 + 0.01 * i as f64;
                CurveSample { x: mu, value: -mu.exp(), error: 0.0 }
            })
            .collect();
        let g = FreeEnergyCurve::new(1.0, f64::INFINITY, CurveKind::G, Provenance::Analytic, g).unwrap();
        let rhos: Vec<f64> = (0..30).map(|i| 0.1 + 0.1 * i as f64).collect();
        let f = legendre_on(&g, LegendreDirection::GToF, &rhos).unwrap();
        for s in &f.samples {
            assert_abs_diff_eq!(s.value, s.x * s.x.ln() - s.x, epsilon = 1e-3);
        }
        let q: Vec<CurveSample> = (0..=400).map(|i| {
            let r = -2.0 + 0.01 * i as f64;
            CurveSample { x: r, value: 0.5 * r * r, error: 0.0 }
        }).collect();
        let q = FreeEnergyCurve::new(1.0, f64::INFINITY, CurveKind::F, Provenance::Analytic, q).unwrap();
        let mus: Vec<f64> = (0..20).map(|i| -1.5 + 0.15 * i as f64).collect();
        let gq = legendre_on(&q, LegendreDirection::FToG, &mus).unwrap();
        for s in &gq.samples {
            assert_abs_diff_eq!(s.value, -0.5 * s.x * s.x, epsilon = 1e-4);
        }
        let short = FreeEnergyCurve::new(1.0, 1.0, CurveKind::G, Provenance::Analytic, g.samples[..5].to_vec()).unwrap();
        assert!(legendre(&short, LegendreDirection::GToF).is_err());
    }

    #[test]
    fn hull_flags_changes() {
        let s: Vec<CurveSample> = [0.0, 1.0, 0.5, 3.0].iter().enumerate().map(|(i, v)| CurveSample { x: i as f64, value: *v, error: 0.0 }).collect();
        let c = FreeEnergyCurve::new(0.0, 1.0, CurveKind::F, Provenance::GroundState, s).unwrap();
        assert!(!c.shape_check().ok);
        let (h, changed) = c.hull();
        assert!(changed);
        assert!(h.shape_check().ok);
        assert_abs_diff_eq!(h.samples[1].value, 0.25);
        let (_, again) = h.hull();
        assert!(!again);
    }

    #[test]
    fn extrapolation_examples() {
        let r = RateModel::new(4.0, 1);
        let data: Vec<(f64, Estimate)> = [8.0, 16.0, 32.0, 64.0].iter().map(|l| (*l, Estimate::exact(3.0 + 5.0 / l))).collect();
        let fit = extrapolate_limit(&data, &r).unwrap();
        assert_abs_diff_eq!(fit.limit, 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.fitted_c, 5.0, epsilon = 1e-10);
        let r2 = RateModel::new(2.0, 1);
        let data: Vec<(f64, Estimate)> = [8.0f64, 16.0, 32.0, 64.0, 128.0].iter().map(|l| (*l, Estimate::new(-1.5 + 0.7 * l.ln() / l, 1e-9))).collect();
        let fit = extrapolate_limit(&data, &r2).unwrap();
        assert_abs_diff_eq!(fit.limit, -1.5, epsilon = 1e-6);
        assert_abs_diff_eq!(fit.fitted_c, 0.7, epsilon = 1e-6);
        assert!(!fit.refused);
        assert!(extrapolate_limit(&data[..3], &r2).is_err());
    }

    /// Independent evaluator of the fixed-density lower bound for `α ≠ d`.
    fn f_lower_oracle(rho: f64, t: f64, k: f64, r0: f64, c: f64, alpha: f64, d: f64) -> f64 {
        let g = 1.0 + f64::max(1.0, alpha / d);
        c / k * r0.powf(d * (g - 1.0)) * rho.powf(g) - (k + c / k + t) * rho + t * rho * rho.ln()
    }

    #[test]
    fn density_bound_examples() {
        let p = BoundParams { kappa: 1.0, r0: 1.0, alpha: 2.0, d: 1, c_upper: 1.0, c_lower: 1.0 };
        let b = bound_f(0.0, 1.0, &p);
        assert_eq!((b.lower, b.upper), (0.0, 0.0));
        assert_eq!(gamma(12.0, 3), 5.0);
        let b = bound_f(1.0, 1.0, &p);
        assert_abs_diff_eq!(b.lower, -2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(b.lower, f_lower_oracle(1.0, 1.0, 1.0, 1.0, 1.0, 2.0, 1.0), epsilon = 1e-15);
        let mu = bound_mu(std::f64::consts::E, 1.0, &BoundParams { kappa: 1e-9, c_upper: 0.0, c_lower: 0.0, ..p });
        assert_abs_diff_eq!(mu.upper, 1.0, epsilon = 1e-8);
        assert_abs_diff_eq!(mu.lower, 1.0 - 1e-9 - 1.0, epsilon = 1e-8);
        let m1 = bound_mu(1.0, 1.0, &p);
        assert!(m1.upper > m1.lower);
        // α = d selects the logarithmic form.
        let pl = BoundParams { alpha: 1.0, r0: 2.0, ..p };
        let bl = bound_mu(3.0, 1.0, &pl);
        let expect = 2.0 * 3.0 * (6.0f64).ln() + 3.0 * 3.0 + 1.0 + 1.0 + 3f64.ln();
        assert_abs_diff_eq!(bl.upper, expect, epsilon = 1e-12);
    }

    #[test]
    fn grand_canonical_bound_examples() {
        let p = GcParams { k: 1.0, c: 1.0, gamma: 2.0, log_branch: false };
        let far = bound_g(-60.0, 1.0, &p);
        assert!(far.lower < 0.0 && far.lower > -1e-20 && far.upper <= 0.0);
        assert_abs_diff_eq!(bound_g(-1.0, 1.0, &p).lower, -1.0, epsilon = 1e-15);
        // μ = C + 1, γ = 2: lower = -K (μ + C)^2 - T.
        assert_abs_diff_eq!(bound_g(2.0, 1.0, &p).lower, -9.0 - 1.0, epsilon = 1e-12);
        let z = bound_g(2.0, 0.0, &p);
        assert!(z.zero_temperature);
        assert_abs_diff_eq!(z.lower, -9.0, epsilon = 1e-12);
    }

    #[test]
    fn universal_and_subadditivity_examples() {
        let omega = SimBox::interval(0.0, 1.0);
        let one = DensityProfile::constant(&omega, 0.1, 1.0).unwrap();
        let zero = DensityProfile::constant(&omega, 0.1, 0.0).unwrap();
        let up = UniversalParams { kappa: 1.0, c: 1.0, alpha: 2.0, c_m: 1.0 };
        let u0 = universal_g_bounds(&zero, 1.0, &up);
        assert_eq!((u0.lower, u0.upper, u0.upper_simple), (0.0, 0.0, 0.0));
        assert_abs_diff_eq!(universal_g_bounds(&one, 1.0, &up).lower, -2.0, epsilon = 1e-12);
        let bump = DensityProfile::from_fn(vec![-3.0], 0.05, vec![120], 1.0, |x| (-x[0] * x[0]).exp()).unwrap();
        let ub = universal_g_bounds(&bump, 1.0, &up);
        assert!(ub.lower <= ub.upper && ub.lower <= ub.upper_simple);

        let s = subadditivity_rhs(&one, &zero, 0.3, 0.0, 1.0, 2.0).unwrap();
        assert_abs_diff_eq!(s, 0.3 * 2.0, epsilon = 1e-12);
        let s = subadditivity_rhs(&one, &one, 0.5, 0.0, 1.0, 0.5).unwrap();
        assert_abs_diff_eq!(s, 1.0 + 2.0 + 2f64.ln(), epsilon = 1e-12);
        assert!(subadditivity_rhs(&one, &one, 0.6, 0.0, 1.0, 2.0).is_err());
    }

    /// Independent evaluator of the `α = d` sub-additivity budget.
    #[test]
    fn subadditivity_log_branch() {
        let omega = SimBox::interval(0.0, 1.0);
        let a = DensityProfile::constant(&omega, 0.5, 3.0).unwrap();
        let b = DensityProfile::constant(&omega, 0.5, 2.0).unwrap();
        let (eps, c, t): (f64, f64, f64) = (0.25, 1.5, 0.7);
        let le = -eps.ln();
        let expect = c * eps * 9.0 * 3f64.ln() + 3.0 + c / eps * 4.0 * 2f64.ln() + c * le / eps * 4.0 + c * le * 2.0 + t * 2.0 * 2f64.ln();
        assert_abs_diff_eq!(subadditivity_rhs(&a, &b, eps, t, c, 1.0).unwrap(), expect, epsilon = 1e-12);
    }

    #[test]
    fn rate_examples() {
        let p = RateParams { c: 1.0, s: 3.0, d: 1, gamma: 3.0, ell_min: 4.0 };
        assert_eq!(fixed_density_rate(0.0, 1.0, 100.0, &p).unwrap(), 0.0);
        assert_eq!(fixed_density_rate(0.0, 0.0, 100.0, &p).unwrap(), 0.0);
        assert_abs_diff_eq!(fixed_density_rate(1.0, 1.0, 100.0, &p).unwrap(), 1f64.exp() * 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(fixed_density_rate(1.0, 0.0, 100.0, &p).unwrap(), 2f64.powi(6) * 0.1, epsilon = 1e-9);
        assert!(fixed_density_rate(1.0, 1.0, 2.0, &p).is_err());
        assert!(matches!(fixed_density_rate(1.0, 0.0, 100.0, &RateParams { s: 2.0, ..p }), Err(Error::Unsupported(_))));

        let xp = XiParams::for_tail(1.0, 1.0, 3.0, 1);
        let far = shifted_mu_rate(0.3, 1.0, 1e12, &xp, 1.0, 3.0, 1, 4.0).unwrap();
        assert_abs_diff_eq!(far.mu_minus, 0.3, epsilon = 1e-9);
        assert_abs_diff_eq!(far.mu_plus, 0.3, epsilon = 1e-9);
        let sym = shifted_mu_rate(0.0, 1.0, 10.0, &xp, 1.0, 3.0, 1, 4.0).unwrap();
        // ξ = C_T (1 + 1) = 2 at μ = 0; shift = (1 + 4)/10.
        assert_abs_diff_eq!(sym.mu_plus, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(sym.mu_minus, -0.5, epsilon = 1e-12);
        let t0 = shifted_mu_rate(1.0, 0.0, 16.0, &xp, 1.0, 2.0 + 1e-12, 1, 4.0).unwrap();
        let x0 = xi(0.0, 1.0, 1, &XiParams::for_tail(1.0, 1.0, 2.0, 1));
        assert_abs_diff_eq!(t0.mu_plus - 1.0, x0 / 4.0, epsilon = 1e-9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn density_bounds_are_ordered_for_c_at_least_c(rho in 0.0f64..5.0, t in 0.0f64..3.0, alpha in 1.0f64..8.0) {
            let p = BoundParams { kappa: 1.0, r0: 1.0, alpha, d: 1, c_upper: 1.0, c_lower: 1.0 };
            let b = bound_f(rho, t, &p);
            prop_assert!(b.lower <= b.upper + 1e-12);
        }
    }
}
