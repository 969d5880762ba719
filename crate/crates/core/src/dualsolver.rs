//! Fixed-density free energy `G_T[ρ]` by maximising the concave dual
//! `D(V) = -T log Z_{T,V} - ∫ V ρ` over potentials `V` that are constant on
//! the cells of the target grid.
//!
//! Every `D(V)` is a lower bound on `G_T[ρ]`. The maximiser reproduces the
//! target cell masses, so the reported sandwich constrains the free energy
//! of the grid-resolved problem: states whose cell masses match the target.

use crate::configuration::SimBox;
use crate::error::{arg, Error, Result};
use crate::gibbs::{gcmc_chains, gcmc_log_partition, EnsembleSpec, ExternalPotential, GcmcOptions, OccupancyTable, Pooled};
use crate::lda::DensityProfile;
use crate::numerics::Estimate;
use crate::potentials::PairPotential;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DualBackend {
    /// Occupancy table with one panel per target cell.
    Exact { order: usize, n_max: usize },
    /// Paired chains (identical seeds every iteration) for the densities and
    /// activity integration over `nodes` points for `log Z`.
    Gcmc { options: GcmcOptions, chains: usize, nodes: usize, damping: f64 },
}

pub struct DualProblem {
    pub t: f64,
    pub potential: PairPotential,
    pub target: DensityProfile,
    pub backend: DualBackend,
    table: Option<OccupancyTable>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub dual_value: f64,
    /// `‖ρ_target - ρ_V‖₁ / ‖ρ_target‖₁`
    pub mismatch: f64,
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualState {
    /// Per cell; `+∞` on cells where the target vanishes.
    pub v: Vec<f64>,
    pub dual_value: Estimate,
    /// `ρ_target - ρ_V` per cell.
    pub gradient: Vec<f64>,
    pub model_density: Vec<f64>,
    pub mismatch: f64,
    pub converged: bool,
    pub log: Vec<IterationRecord>,
}

impl DualState {
    pub fn g_estimate(&self) -> Estimate {
        self.dual_value
    }
}

/// Moments of the Gibbs state of `V`.
struct Response {
    log_z: Estimate,
    /// Mean particle number per cell.
    mean: Vec<f64>,
    mean_err: Vec<f64>,
    /// `Cov(n_b, n_c)` when available.
    cov: Option<Vec<f64>>,
}

impl DualProblem {
    pub fn new(t: f64, potential: PairPotential, target: DensityProfile, backend: DualBackend) -> Result<Self> {
        if !(t > 0.0) {
            return Err(Error::Unsupported("the dual problem needs T > 0".into()));
        }
        let table = match &backend {
            DualBackend::Exact { order, n_max } => {
                let panels = target.shape[0];
                if target.shape.iter().any(|s| *s != panels) {
                    return Err(Error::Resolution("the exact backend needs the same number of cells on every axis".into()));
                }
                Some(OccupancyTable::build(&target.support_box(), &potential, 1.0 / t, panels, *order, *n_max)?)
            }
            DualBackend::Gcmc { options, .. } => {
                if target.shape.iter().any(|s| *s != options.density_bins) {
                    return Err(Error::Resolution("chain density bins must match the target grid".into()));
                }
                None
            }
        };
        Ok(Self { t, potential, target, backend, table })
    }

    pub fn cells(&self) -> usize {
        self.target.len()
    }

    fn cell_mass(&self) -> Vec<f64> {
        let h = self.target.cell_volume();
        self.target.values.iter().map(|r| r * h).collect()
    }

    /// `V⁰ = -T log ρ_target`, exact for the ideal gas.
    pub fn initial_potential(&self) -> Vec<f64> {
        self.target.values.iter().map(|r| if *r > 0.0 { -self.t * r.ln() } else { f64::INFINITY }).collect()
    }

    fn spec(&self, v: &[f64]) -> Result<EnsembleSpec> {
        let mu0 = v.iter().filter(|x| x.is_finite()).map(|x| -x).fold(0.0, f64::max);
        let ext = ExternalPotential::new(mu0, self.target.shape.clone(), v.to_vec())?;
        Ok(EnsembleSpec::external(self.t, ext, self.target.support_box(), self.potential.clone()))
    }

    fn response(&self, v: &[f64], with_log_z: bool) -> Result<Response> {
        let beta = 1.0 / self.t;
        match (&self.backend, &self.table) {
            (DualBackend::Exact { .. }, Some(table)) => {
                let la: Vec<f64> = v.iter().map(|x| -beta * x).collect();
                let m = table.evaluate(&la);
                let n = m.mean.len();
                Ok(Response {
                    log_z: Estimate::exact(m.log_z),
                    mean_err: vec![0.0; n],
                    cov: Some(m.covariance()),
                    mean: m.mean,
                })
            }
            (DualBackend::Gcmc { options, chains, nodes, .. }, _) => {
                let spec = self.spec(v)?;
                let runs = gcmc_chains(&spec, options, *chains)?;
                let h = self.target.cell_volume();
                let mut mean = Vec::with_capacity(self.cells());
                let mut mean_err = Vec::with_capacity(self.cells());
                for b in 0..self.cells() {
                    let p = runs
                        .iter()
                        .map(|r| Pooled::from_estimate(r.density[b], r.n_samples))
                        .fold(Pooled::default(), Pooled::merge)
                        .estimate();
                    mean.push(p.value * h);
                    mean_err.push(p.error * h);
                }
                let log_z = if with_log_z { gcmc_log_partition(&spec, options, *nodes)? } else { Estimate::new(f64::NAN, f64::INFINITY) };
                Ok(Response { log_z, mean, mean_err, cov: None })
            }
            _ => unreachable!(),
        }
    }

    fn value_from(&self, v: &[f64], r: &Response) -> Estimate {
        let mass = self.cell_mass();
        let lin: f64 = v.iter().zip(&mass).filter(|(_, m)| **m > 0.0).map(|(x, m)| x * m).sum();
        Estimate::new(-self.t * r.log_z.value - lin, self.t * r.log_z.error)
    }

    fn mismatch(&self, r: &Response) -> (Vec<f64>, f64) {
        let h = self.target.cell_volume();
        let grad: Vec<f64> = self.target.values.iter().zip(&r.mean).map(|(t, n)| t - n / h).collect();
        let total: f64 = self.target.values.iter().sum();
        let l1: f64 = grad.iter().map(|g| g.abs()).sum();
        (grad, l1 / total)
    }
}

/// `D(V) = -T log Z_{T,V} - ∫ V ρ_target`, a lower bound on `G_T[ρ_target]`.
pub fn dual_value(problem: &DualProblem, v: &[f64]) -> Result<Estimate> {
    if v.len() != problem.cells() || v.iter().any(|x| x.is_nan()) {
        return arg("one potential value per cell");
    }
    for (x, r) in v.iter().zip(&problem.target.values) {
        if x.is_infinite() && *x > 0.0 && *r > 0.0 {
            return Ok(Estimate::exact(f64::NEG_INFINITY));
        }
    }
    let r = problem.response(v, true)?;
    Ok(problem.value_from(v, &r))
}

/// Solve `A x = b` for a small symmetric positive matrix by Gaussian
/// elimination with partial pivoting.
fn solve_linear(mut a: Vec<f64>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|i, j| a[i * n + col].abs().partial_cmp(&a[j * n + col].abs()).unwrap())?;
        if a[piv * n + col].abs() < 1e-300 {
            return None;
        }
        if piv != col {
            for k in 0..n {
                a.swap(piv * n + k, col * n + k);
            }
            b.swap(piv, col);
        }
        for row in col + 1..n {
            let f = a[row * n + col] / a[col * n + col];
            for k in col..n {
                a[row * n + k] -= f * a[col * n + k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row * n + k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row * n + row];
    }
    Some(x)
}

pub fn solve(problem: &DualProblem, tol: f64, max_iter: usize) -> Result<DualState> {
    solve_from(problem, problem.initial_potential(), tol, max_iter)
}

/// Ascent from `v0`. The exact backend takes Newton steps with the Gibbs
/// covariance as curvature and halves the step until the dual value does
/// not decrease. The chain backend iterates the ideal-gas fixed point
/// `V ← V + damping·T log(ρ_V / ρ_target)` and integrates `log Z` once at
/// the end.
pub fn solve_from(problem: &DualProblem, v0: Vec<f64>, tol: f64, max_iter: usize) -> Result<DualState> {
    if v0.len() != problem.cells() {
        return arg("one potential value per cell");
    }
    let active: Vec<usize> = (0..problem.cells()).filter(|b| problem.target.values[*b] > 0.0).collect();
    let mut v = v0;
    for b in 0..problem.cells() {
        if problem.target.values[b] == 0.0 {
            v[b] = f64::INFINITY;
        } else if !v[b].is_finite() {
            return arg("initial potential must be finite on the support");
        }
    }
    let beta = 1.0 / problem.t;
    let mut log = Vec::new();
    match &problem.backend {
        DualBackend::Exact { .. } => {
            let mut r = problem.response(&v, true)?;
            let mut value = problem.value_from(&v, &r);
            let mut converged = false;
            for it in 0..max_iter {
                let (_, mis) = problem.mismatch(&r);
                log.push(IterationRecord { iteration: it, dual_value: value.value, mismatch: mis, step: 0.0 });
                if mis < tol {
                    converged = true;
                    break;
                }
                let cov = r.cov.as_ref().unwrap();
                let n = problem.cells();
                let k = active.len();
                let mut h = vec![0.0; k * k];
                let mut g = vec![0.0; k];
                let mass = problem.cell_mass();
                let trace: f64 = active.iter().map(|&b| cov[b * n + b]).sum();
                for (i, &b) in active.iter().enumerate() {
                    g[i] = r.mean[b] - mass[b];
                    for (j, &c) in active.iter().enumerate() {
                        h[i * k + j] = beta * cov[b * n + c];
                    }
                    h[i * k + i] += 1e-12 * beta * trace / k as f64 + 1e-300;
                }
                let dir = solve_linear(h, g.clone()).unwrap_or(g);
                let mut step = 1.0;
                let mut accepted = false;
                while step > 1e-12 {
                    let mut trial = v.clone();
                    for (i, &b) in active.iter().enumerate() {
                        trial[b] += step * dir[i];
                    }
                    let rt = problem.response(&trial, true)?;
                    let vt = problem.value_from(&trial, &rt);
                    if vt.value >= value.value - 1e-14 * (1.0 + value.value.abs()) {
                        v = trial;
                        r = rt;
                        value = vt;
                        accepted = true;
                        break;
                    }
                    step *= 0.5;
                }
                if let Some(last) = log.last_mut() {
                    last.step = step;
                }
                if !accepted {
                    break;
                }
            }
            let (grad, mis) = problem.mismatch(&r);
            let h = problem.target.cell_volume();
            Ok(DualState {
                dual_value: value,
                gradient: grad,
                model_density: r.mean.iter().map(|n| n / h).collect(),
                mismatch: mis,
                converged: converged || mis < tol,
                log,
                v,
            })
        }
        DualBackend::Gcmc { damping, .. } => {
            let h = problem.target.cell_volume();
            let mut converged = false;
            let mut r = problem.response(&v, false)?;
            for it in 0..max_iter {
                let (_, mis) = problem.mismatch(&r);
                let noise: f64 = r.mean_err.iter().sum::<f64>() / h / problem.target.values.iter().sum::<f64>();
                log.push(IterationRecord { iteration: it, dual_value: f64::NAN, mismatch: mis, step: *damping });
                if mis < tol.max(2.0 * noise) {
                    converged = true;
                    break;
                }
                for &b in &active {
                    let model = (r.mean[b] / h).max(1e-3 * problem.target.values[b]);
                    v[b] += damping * problem.t * (model / problem.target.values[b]).ln();
                }
                r = problem.response(&v, false)?;
            }
            let value = dual_value(problem, &v)?;
            let (grad, mis) = problem.mismatch(&r);
            if let Some(last) = log.last_mut() {
                last.dual_value = value.value;
            }
            Ok(DualState {
                dual_value: value,
                gradient: grad,
                model_density: r.mean.iter().map(|n| n / h).collect(),
                mismatch: mis,
                converged,
                log,
                v,
            })
        }
    }
}

/// `lower <= G <= upper` for the grid-resolved problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sandwich {
    pub lower: f64,
    pub upper: f64,
    pub gap: f64,
}

impl Sandwich {
    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lower + self.upper)
    }
}

/// Upper side from the Gibbs state of `V*`: it is the minimiser for its own
/// cell masses `m*`, so `G[m*] = -T log Z - V*·m*`. Moving to the target
/// masses costs at most the first-order term `-V*·(m_t - m*)` plus the
/// quadratic remainder `‖m_t - m*‖² / (2βλ)` with `λ` the smallest
/// eigenvalue bound of the cell covariance (Gershgorin on the exact path,
/// smallest Poisson variance `min ⟨n_b⟩` on the chain path).
pub fn primal_gap_certificate(problem: &DualProblem, state: &DualState) -> Result<Sandwich> {
    let h = problem.target.cell_volume();
    let active: Vec<usize> = (0..problem.cells()).filter(|b| problem.target.values[*b] > 0.0).collect();
    let r = problem.response(&state.v, false)?;
    let lambda = match &r.cov {
        Some(cov) => {
            let n = problem.cells();
            active
                .iter()
                .map(|&b| cov[b * n + b] - active.iter().filter(|&&c| c != b).map(|&c| cov[b * n + c].abs()).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
        }
        None => active.iter().map(|&b| r.mean[b]).fold(f64::INFINITY, f64::min),
    };
    if !(lambda > 0.0) {
        return Err(Error::Infeasible("the cell covariance is not diagonally dominant; no curvature bound".into()));
    }
    let dm2: f64 = state.gradient.iter().map(|g| (g * h).powi(2)).sum();
    let remainder = problem.t * dm2 / (2.0 * lambda);
    let first: f64 = active.iter().map(|&b| (state.gradient[b] * h * state.v[b]).abs()).sum();
    let lower = state.dual_value.value - state.dual_value.error;
    let upper = state.dual_value.value + state.dual_value.error + 2.0 * first + remainder;
    Ok(Sandwich { lower, upper, gap: upper - lower })
}

/// Domain of a target profile.
pub fn target_domain(profile: &DensityProfile) -> SimBox {
    profile.support_box()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn exact(target: DensityProfile, w: PairPotential, n_max: usize) -> DualProblem {
        DualProblem::new(1.0, w, target, DualBackend::Exact { order: 4, n_max }).unwrap()
    }

    #[test]
    fn ideal_gas_examples() {
        let unit = DensityProfile::new(vec![0.0], 1.0, vec![1], vec![1.0], 1.0).unwrap();
        let p = exact(unit, PairPotential::zero(), 30);
        let st = solve(&p, 1e-10, 20).unwrap();
        assert_abs_diff_eq!(st.v[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(st.dual_value.value, -1.0, epsilon = 1e-10);
        let two = DensityProfile::new(vec![0.0], 1.0, vec![2], vec![1.0, 2.0], 2.0).unwrap();
        let p = exact(two, PairPotential::zero(), 40);
        let st = solve(&p, 1e-10, 20).unwrap();
        assert!(st.converged);
        assert_abs_diff_eq!(st.v[1], -2f64.ln(), epsilon = 1e-9);
        assert_abs_diff_eq!(st.dual_value.value, -1.0 + 2.0 * 2f64.ln() - 2.0, epsilon = 1e-9);
        let s = primal_gap_certificate(&p, &st).unwrap();
        assert!(s.gap < 1e-8);
        // A constant potential gives the grand-canonical value plus μ∫ρ.
        let d = dual_value(&p, &[-0.3, -0.3]).unwrap().value;
        let g = -(0.3f64.exp() * 2.0);
        assert_abs_diff_eq!(d, g + 0.3 * 3.0, epsilon = 1e-10);
    }

    #[test]
    fn ideal_gas_converges_from_a_bad_start() {
        let target = DensityProfile::new(vec![0.0], 0.5, vec![4], vec![0.5, 1.0, 1.5, 0.0], 2.0).unwrap();
        let p = DualProblem::new(1.0, PairPotential::zero(), target.clone(), DualBackend::Exact { order: 2, n_max: 16 }).unwrap();
        let st = solve_from(&p, vec![1.0; 4], 1e-10, 60).unwrap();
        assert!(st.converged);
        let expect = target.integral(|r| if r > 0.0 { r * r.ln() - r } else { 0.0 });
        assert_abs_diff_eq!(st.dual_value.value, expect, epsilon = 1e-8);
        assert!(st.log.windows(2).all(|w| w[1].dual_value >= w[0].dual_value - 1e-12));
        assert!(st.v[3].is_infinite());
    }

    fn soft_target() -> DensityProfile {
        DensityProfile::new(vec![0.0], 0.5, vec![4], vec![0.8, 1.2, 1.0, 0.6], 1.2).unwrap()
    }

    /// Oracle: independent random starts agree and random potentials stay below.
    #[test]
    fn soft_core_multistart_and_weak_duality() {
        let p = exact(soft_target(), PairPotential::soft_core(0.2, 6.0), 9);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut values = Vec::new();
        for _ in 0..5 {
            let v0: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let st = solve_from(&p, v0, 1e-9, 100).unwrap();
            assert!(st.converged);
            values.push(st.dual_value.value);
        }
        let spread = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - values.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(spread < 1e-4, "{values:?}");
        let best = values[0];
        for _ in 0..100 {
            let v: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
            assert!(dual_value(&p, &v).unwrap().value <= best + 1e-9);
        }
        let st = solve(&p, 1e-9, 100).unwrap();
        let s = primal_gap_certificate(&p, &st).unwrap();
        assert!(s.gap < 0.1 * st.dual_value.value.abs());
        assert!(s.lower <= s.upper);
    }

    #[test]
    fn chain_backend_matches_exact_on_a_small_target() {
        let target = soft_target();
        let w = PairPotential::soft_core(0.2, 6.0);
        let ex = solve(&exact(target.clone(), w.clone(), 9), 1e-9, 100).unwrap();
        let mut o = GcmcOptions::new(4000, 200, 17);
        o.density_bins = 4;
        let p = DualProblem::new(1.0, w, target, DualBackend::Gcmc { options: o, chains: 8, nodes: 6, damping: 0.7 }).unwrap();
        let st = solve(&p, 1e-2, 30).unwrap();
        assert!(st.converged, "{:?}", st.log);
        let diff = (st.dual_value.value - ex.dual_value.value).abs();
        assert!(diff < 4.0 * st.dual_value.error + 0.02, "{:?} vs {:?}", st.dual_value, ex.dual_value);
    }

    #[test]
    fn rejections() {
        assert!(DualProblem::new(0.0, PairPotential::zero(), soft_target(), DualBackend::Exact { order: 2, n_max: 4 }).is_err());
        let p = exact(soft_target(), PairPotential::zero(), 8);
        assert!(dual_value(&p, &[0.0; 3]).is_err());
    }
}
