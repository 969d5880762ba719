//! Command-line orchestration. Every subcommand reads an experiment config,
//! writes JSON reports and CSV curves into the output directory and stamps
//! each file with the crate version and a SHA-256 hash of the effective
//! config. Outputs contain no timestamps, so reruns are byte-identical.

use crate::configuration::SimBox;
use crate::dualsolver::{primal_gap_certificate, solve, DualBackend, DualProblem};
use crate::error::Error;
use crate::gibbs::{exact_partition_with, gcmc_run_with, multiset_count, ChainState, EnsembleSpec, ExactOptions, GcmcOptions, EXACT_BUDGET};
use crate::lda::{lda_error_rhs, lda_functional, DensityProfile};
use crate::potentials::{check_regularity, default_grid, repulsive_split, stability_scan, PairPotential, SplitRule};
use crate::ruelle::{activity_shape, config_for_potential, moment_bound, scan_pointwise_margin};
use crate::thermo::{extrapolate_limit, CurveKind, CurveSample, FiniteVolume, FreeEnergyCurve, Method, Provenance, RateModel};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED_CHECK: i32 = 2;
pub const EXIT_RESOURCE: i32 = 3;
pub const EXIT_USAGE: i32 = 64;
const EXIT_OTHER: i32 = 1;

#[derive(Parser, Debug)]
#[command(name = "gibbsforge", version, about = "Free energies and local moment bounds for classical particle systems")]
pub struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory for JSON and CSV reports.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Wall-clock budget; exceeding it turns the exit status into 3.
    #[arg(long, global = true)]
    pub budget_seconds: Option<f64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Overrides {
    /// Potential TOML with a `[potential]` table.
    #[arg(long)]
    pub potential: Option<PathBuf>,
    /// Temperature.
    #[arg(long = "T")]
    pub t: Option<f64>,
    /// Chemical potential.
    #[arg(long)]
    pub mu: Option<f64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Validate a potential against its envelope and report its split and stability witness.
    PotentialCheck(Overrides),
    /// Quadrature enumeration of the grand-canonical partition function.
    GibbsExact(Overrides),
    /// Grand-canonical Monte Carlo run with a resumable JSON checkpoint.
    Gcmc {
        #[command(flatten)]
        o: Overrides,
        /// Checkpoint JSON written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Finite-volume g(μ) curves over a side-length grid and their extrapolated limit.
    ThermoLimit(Overrides),
    /// Compare G_T[ρ] with the local density approximation across window sizes.
    LdaVerify {
        #[command(flatten)]
        o: Overrides,
        /// Target density profile CSV.
        #[arg(long)]
        target: Option<PathBuf>,
    },
    /// Solve the dual problem for a target density profile.
    DualSolve {
        #[command(flatten)]
        o: Overrides,
        /// Target density profile CSV.
        #[arg(long)]
        target: Option<PathBuf>,
        /// Relative density mismatch at which the solver stops.
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Randomised check of the pointwise moment inequality and of the moment bounds.
    RuelleVerify {
        #[command(flatten)]
        o: Overrides,
        /// Random (x, Y) draws for the pointwise check.
        #[arg(long)]
        draws: Option<usize>,
    },
    /// Fit g(μ, ℓ) = g_∞ + C ε_ℓ and report the relative residual.
    RateFit(Overrides),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleSection {
    pub t: f64,
    pub mu: f64,
    /// Box side lengths, one per axis.
    pub lengths: Vec<f64>,
    pub periodic: bool,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        Self { t: 1.0, mu: 0.0, lengths: vec![1.0], periodic: false }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExactSection {
    pub n_max: usize,
    pub order: usize,
    pub panels: Option<usize>,
}

impl Default for ExactSection {
    fn default() -> Self {
        Self { n_max: 6, order: 8, panels: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GcmcSection {
    pub sweeps: usize,
    pub burn_in: usize,
    pub chains: usize,
    /// Activity nodes for `log Z` by integration.
    pub nodes: usize,
    pub density_bins: usize,
}

impl Default for GcmcSection {
    fn default() -> Self {
        Self { sweeps: 20_000, burn_in: 2_000, chains: 8, nodes: 8, density_bins: 8 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThermoSection {
    /// `exact` or `gcmc`.
    pub backend: String,
    pub ells: Vec<f64>,
    pub mus: Vec<f64>,
    /// Side of the periodic box used for `f_T`.
    pub f_side: f64,
}

impl Default for ThermoSection {
    fn default() -> Self {
        Self {
            backend: "exact".into(),
            ells: vec![2.0, 3.0, 4.0, 5.0, 6.0],
            mus: (0..17).map(|i| -3.0 + 0.25 * i as f64).collect(),
            f_side: 4.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LdaSection {
    pub target: Option<PathBuf>,
    pub ells: Vec<f64>,
    pub p: f64,
    pub b: f64,
}

impl Default for LdaSection {
    fn default() -> Self {
        Self { target: None, ells: vec![2.0, 4.0, 8.0], p: 2.0, b: 2.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DualSection {
    pub target: Option<PathBuf>,
    pub tol: f64,
    pub max_iter: usize,
    /// `exact`, `gcmc` or `auto`.
    pub backend: String,
    pub damping: f64,
}

impl Default for DualSection {
    fn default() -> Self {
        Self { target: None, tol: 1e-6, max_iter: 100, backend: "auto".into(), damping: 0.7 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RuelleSection {
    pub split: SplitRule,
    pub psi_exponent: f64,
    pub draws: usize,
    pub mus: Vec<f64>,
}

impl Default for RuelleSection {
    fn default() -> Self {
        Self { split: SplitRule::Truncation, psi_exponent: 0.5, draws: 100_000, mus: vec![-1.0, 0.0, 1.0] }
    }
}

/// Everything a run depends on. Relative paths resolve against the config file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub potential: Option<PairPotential>,
    pub potential_file: Option<PathBuf>,
    pub ensemble: EnsembleSection,
    pub exact: ExactSection,
    pub gcmc: GcmcSection,
    pub thermo: ThermoSection,
    pub lda: LdaSection,
    pub dual: DualSection,
    pub ruelle: RuelleSection,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Lib(Error),
    Io(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Lib(e) => write!(f, "{e}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Lib(Error::Argument(_)) => EXIT_USAGE,
            CliError::Lib(Error::Resource(_)) => EXIT_RESOURCE,
            _ => EXIT_OTHER,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

/// Loaded config with resolved potential and provenance.
struct Context {
    cfg: ExperimentConfig,
    base: PathBuf,
    out: PathBuf,
    hash: String,
}

impl Context {
    fn potential(&self) -> CliResult<PairPotential> {
        self.cfg.potential.clone().ok_or_else(|| CliError::Usage("no potential: set [potential], potential_file or --potential".into()))
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    fn domain(&self) -> CliResult<SimBox> {
        let e = &self.cfg.ensemble;
        let b = SimBox::new(vec![0.0; e.lengths.len()], e.lengths.clone())?;
        Ok(if e.periodic { b.periodic() } else { b })
    }

    fn spec(&self) -> CliResult<EnsembleSpec> {
        Ok(EnsembleSpec::chemical(self.cfg.ensemble.t, self.cfg.ensemble.mu, self.domain()?, self.potential()?))
    }

    fn exact_options(&self, d: usize) -> ExactOptions {
        let mut o = ExactOptions::new(self.cfg.exact.n_max, self.cfg.exact.order, d);
        if let Some(p) = self.cfg.exact.panels {
            o.panels = p;
        }
        o
    }

    fn gcmc_options(&self) -> GcmcOptions {
        let g = &self.cfg.gcmc;
        let mut o = GcmcOptions::new(g.sweeps, g.burn_in, self.cfg.seed);
        o.density_bins = g.density_bins;
        o
    }

    fn stamp(&self) -> Value {
        json!({ "version": env!("CARGO_PKG_VERSION"), "config_hash": self.hash })
    }

    fn write_json(&self, name: &str, mut report: Value) -> CliResult<Value> {
        if let Value::Object(m) = &mut report {
            m.insert("provenance".into(), self.stamp());
        }
        let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Io(e.to_string()))?;
        std::fs::write(self.out.join(name), format!("{text}\n"))?;
        Ok(report)
    }

    fn write_csv(&self, name: &str, body: &str) -> CliResult<String> {
        let text = format!("# gibbsforge {} config_hash={}\n{body}", env!("CARGO_PKG_VERSION"), self.hash);
        std::fs::write(self.out.join(name), text)?;
        Ok(name.to_string())
    }
}

/// Read an experiment config and resolve its `potential_file`.
pub fn load_experiment(path: &Path) -> CliResult<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let mut cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| CliError::Usage(format!("config schema: {e}")))?;
    if let Some(f) = cfg.potential_file.take() {
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.potential = Some(read_potential(&if f.is_absolute() { f } else { base.join(f) })?);
    }
    Ok(cfg)
}

fn read_potential(path: &Path) -> CliResult<PairPotential> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    Ok(PairPotential::from_toml_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?)
}

fn load(cli: &Cli, o: Option<&Overrides>) -> CliResult<Context> {
    let (mut cfg, base) = match &cli.config {
        Some(p) => (load_experiment(p)?, p.parent().map(Path::to_path_buf).unwrap_or_default()),
        None => (ExperimentConfig::default(), PathBuf::from(".")),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = o {
        if let Some(p) = &o.potential {
            cfg.potential = Some(read_potential(p)?);
        }
        if let Some(t) = o.t {
            cfg.ensemble.t = t;
        }
        if let Some(mu) = o.mu {
            cfg.ensemble.mu = mu;
        }
    }
    let canonical = serde_json::to_string(&cfg).map_err(|e| CliError::Usage(e.to_string()))?;
    let hash = format!("{:x}", Sha256::digest(canonical.as_bytes()));
    std::fs::create_dir_all(&cli.out)?;
    Ok(Context { cfg, base, out: cli.out.clone(), hash })
}

fn read_profile(ctx: &Context, path: Option<&PathBuf>) -> CliResult<DensityProfile> {
    let p = path.ok_or_else(|| CliError::Usage("a target profile CSV is required".into()))?;
    let text = std::fs::read_to_string(ctx.resolve(p)).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
    Ok(DensityProfile::from_csv(&text)?)
}

fn potential_check(ctx: &Context) -> CliResult<(Value, bool)> {
    let w = ctx.potential()?;
    let d = ctx.cfg.ensemble.lengths.len().max(1);
    let reg = check_regularity(&w, &default_grid())?;
    let split = repulsive_split(&w).ok();
    let scan = stability_scan(&w, d, 12, 16, w.r0.max(0.1), ctx.cfg.seed)?;
    let consistent = scan.kappa_hat <= w.stability_bound() + 1e-9;
    let report = json!({
        "potential": w,
        "regularity": reg,
        "split": split,
        "stability_witness": scan.kappa_hat,
        "stability_bound": w.stability_bound(),
        "stability_consistent": consistent,
    });
    Ok((ctx.write_json("potential_check.json", report)?, reg.pass && consistent))
}

fn gibbs_exact(ctx: &Context) -> CliResult<Value> {
    let spec = ctx.spec()?;
    let r = exact_partition_with(&spec, &ctx.exact_options(spec.d()))?;
    let mut csv = String::from("bin,density\n");
    for (b, rho) in r.density().iter().enumerate() {
        csv.push_str(&format!("{b},{rho:.12e}\n"));
    }
    let profile = ctx.write_csv("gibbs_exact_profile.csv", &csv)?;
    ctx.write_json(
        "gibbs_exact.json",
        json!({
            "logZ": r.log_z,
            "quadrature_error": r.quadrature_error,
            "tail_bound": r.tail_bound,
            "moments": { "mean_n": r.mean_n, "mean_n2": r.mean_n2, "var_n": r.var_n() },
            "n_distribution": r.n_distribution,
            "profile_csv_path": profile,
        }),
    )
}

fn gcmc(ctx: &Context, resume: Option<&PathBuf>) -> CliResult<Value> {
    let spec = ctx.spec()?;
    let mut o = ctx.gcmc_options();
    if let Some(p) = resume {
        let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
        let state: ChainState = serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("checkpoint: {e}")))?;
        o.resume = Some(state);
    }
    let r = gcmc_run_with(&spec, &o)?;
    let state = serde_json::to_string_pretty(&r.state).map_err(|e| CliError::Io(e.to_string()))?;
    std::fs::write(ctx.out.join("gcmc_state.json"), format!("{state}\n"))?;
    let mut csv = String::from("bin,density,error\n");
    for (b, e) in r.density.iter().enumerate() {
        csv.push_str(&format!("{b},{:.12e},{:.6e}\n", e.value, e.error));
    }
    let profile = ctx.write_csv("gcmc_profile.csv", &csv)?;
    ctx.write_json(
        "gcmc.json",
        json!({
            "moments": { "n": r.n, "n2": r.n2, "var_n": r.var_n },
            "acceptance": r.acceptance,
            "tau_int": r.tau_int,
            "degenerate": r.degenerate,
            "samples": r.n_samples,
            "profile_csv_path": profile,
            "checkpoint": "gcmc_state.json",
        }),
    )
}

fn method_for(ctx: &Context, backend: &str, d: usize) -> CliResult<Method> {
    match backend {
        "exact" => Ok(Method::Exact(ctx.exact_options(d))),
        "gcmc" => Ok(Method::Gcmc { options: ctx.gcmc_options(), nodes: ctx.cfg.gcmc.nodes }),
        other => usage(format!("unknown backend `{other}`")),
    }
}

/// `g(μ, ℓ)` on the cubes of side `ℓ` with the configured backend.
fn g_sequence(ctx: &Context, mu: f64) -> CliResult<Vec<(f64, crate::numerics::Estimate)>> {
    let w = ctx.potential()?;
    let d = ctx.cfg.ensemble.lengths.len().max(1);
    let mut out = Vec::new();
    for &ell in &ctx.cfg.thermo.ells {
        let mut method = method_for(ctx, &ctx.cfg.thermo.backend, d)?;
        if let Method::Exact(o) = &mut method {
            if ctx.cfg.exact.panels.is_none() {
                o.panels = if d == 1 { ell.ceil() as usize } else { 2 };
            }
        }
        let mut domain = SimBox::cube(d, ell);
        if ctx.cfg.ensemble.periodic {
            domain = domain.periodic();
        }
        let fv = FiniteVolume::new(ctx.cfg.ensemble.t, domain, w.clone(), method)?;
        out.push((ell, fv.g(mu)?));
    }
    Ok(out)
}

fn thermo_limit(ctx: &Context) -> CliResult<Value> {
    let w = ctx.potential()?;
    let d = ctx.cfg.ensemble.lengths.len().max(1);
    let rate = RateModel::new(w.s, d);
    let mut csv = String::from("mu,ell,g,err\n");
    let mut limits = String::from("mu,g_inf,fitted_c,relative_residual\n");
    let mut fits = Vec::new();
    for &mu in &ctx.cfg.thermo.mus {
        let seq = g_sequence(ctx, mu)?;
        for (ell, e) in &seq {
            csv.push_str(&format!("{mu},{ell},{:.12e},{:.6e}\n", e.value, e.error));
        }
        let fit = extrapolate_limit(&seq, &rate)?;
        limits.push_str(&format!("{mu},{:.12e},{:.6e},{:.6e}\n", fit.limit, fit.fitted_c, fit.relative_residual));
        fits.push(json!({ "mu": mu, "fit": fit }));
    }
    let curves = ctx.write_csv("thermo_curves.csv", &csv)?;
    let limit = ctx.write_csv("thermo_limit.csv", &limits)?;
    ctx.write_json(
        "thermo_limit.json",
        json!({ "t": ctx.cfg.ensemble.t, "ells": ctx.cfg.thermo.ells, "provenance_kind": ctx.cfg.thermo.backend, "rate": rate, "fits": fits, "curves_csv": curves, "limit_csv": limit }),
    )
}

fn rate_fit(ctx: &Context) -> CliResult<(Value, bool)> {
    let w = ctx.potential()?;
    let d = ctx.cfg.ensemble.lengths.len().max(1);
    let rate = RateModel::new(w.s, d);
    let seq = g_sequence(ctx, ctx.cfg.ensemble.mu)?;
    let fit = extrapolate_limit(&seq, &rate)?;
    let mut csv = String::from("ell,g,err,abs_diff,fit\n");
    for (ell, e) in &seq {
        csv.push_str(&format!("{ell},{:.12e},{:.6e},{:.6e},{:.6e}\n", e.value, e.error, (e.value - fit.limit).abs(), fit.fitted_c * rate.eps(*ell)));
    }
    let name = ctx.write_csv("rate_fit.csv", &csv)?;
    let pass = fit.relative_residual < 0.1 && !fit.refused;
    let report = json!({ "mu": ctx.cfg.ensemble.mu, "rate": rate, "fit": fit, "pass": pass, "csv": name });
    Ok((ctx.write_json("rate_fit.json", report)?, pass))
}

fn dual_problem(ctx: &Context, target: DensityProfile) -> CliResult<DualProblem> {
    let w = ctx.potential()?;
    let cells = target.len();
    let panels = target.shape[0];
    let fits_exact = target.shape.iter().all(|s| *s == panels)
        && cells <= crate::gibbs::MAX_BINS
        && multiset_count(cells * ctx.cfg.exact.order.pow(target.d() as u32), ctx.cfg.exact.n_max) <= EXACT_BUDGET;
    let backend = match (ctx.cfg.dual.backend.as_str(), fits_exact) {
        ("exact", _) | ("auto", true) => DualBackend::Exact { order: ctx.cfg.exact.order, n_max: ctx.cfg.exact.n_max },
        ("gcmc", _) | ("auto", false) => {
            let mut o = ctx.gcmc_options();
            o.density_bins = panels;
            DualBackend::Gcmc { options: o, chains: ctx.cfg.gcmc.chains, nodes: ctx.cfg.gcmc.nodes, damping: ctx.cfg.dual.damping }
        }
        (other, _) => return usage(format!("unknown dual backend `{other}`")),
    };
    Ok(DualProblem::new(ctx.cfg.ensemble.t, w, target, backend)?)
}

fn dual_solve(ctx: &Context, target: Option<&PathBuf>, tol: Option<f64>) -> CliResult<Value> {
    let target = read_profile(ctx, target.or(ctx.cfg.dual.target.as_ref()))?;
    let problem = dual_problem(ctx, target.clone())?;
    let st = solve(&problem, tol.unwrap_or(ctx.cfg.dual.tol), ctx.cfg.dual.max_iter)?;
    let sandwich = primal_gap_certificate(&problem, &st)?;
    let mut csv = String::from("cell,v,target,model\n");
    for b in 0..st.v.len() {
        csv.push_str(&format!("{b},{:.12e},{:.12e},{:.12e}\n", st.v[b], target.values[b], st.model_density[b]));
    }
    let v_csv = ctx.write_csv("dual_v_star.csv", &csv)?;
    ctx.write_json(
        "dual_solve.json",
        json!({
            "G_lower": sandwich.lower,
            "G_upper": sandwich.upper,
            "dual_value": st.dual_value,
            "mismatch": st.mismatch,
            "converged": st.converged,
            "iterations": st.log,
            "V_star_csv": v_csv,
        }),
    )
}

fn lda_verify(ctx: &Context, target: Option<&PathBuf>) -> CliResult<Value> {
    let target = read_profile(ctx, target.or(ctx.cfg.lda.target.as_ref()))?;
    let w = ctx.potential()?;
    let t = ctx.cfg.ensemble.t;
    let d = target.d();
    let problem = dual_problem(ctx, target.clone())?;
    let st = solve(&problem, ctx.cfg.dual.tol, ctx.cfg.dual.max_iter)?;
    let sandwich = primal_gap_certificate(&problem, &st)?;
    // f_T on a periodic box, so boundary effects do not enter.
    let domain = SimBox::cube(d, ctx.cfg.thermo.f_side).periodic();
    let fv = FiniteVolume::new(t, domain, w, method_for(ctx, &ctx.cfg.thermo.backend, d)?)?;
    let positive: Vec<f64> = target.values.iter().cloned().filter(|v| *v > 0.0).collect();
    let lo = positive.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = positive.iter().cloned().fold(0.0, f64::max);
    let (lo, hi) = if hi - lo < 1e-9 * hi { (0.95 * lo, 1.05 * hi) } else { (lo, hi) };
    let mus = &ctx.cfg.thermo.mus;
    let bracket = (mus.iter().cloned().fold(f64::INFINITY, f64::min), mus.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    let mut samples = Vec::new();
    for i in 0..33 {
        let rho = lo + (hi - lo) * i as f64 / 32.0;
        let (_, e) = fv.f(rho, bracket)?;
        samples.push(CurveSample { x: rho, value: e.value, error: e.error });
    }
    let provenance = if ctx.cfg.thermo.backend == "exact" { Provenance::Exact } else { Provenance::Gcmc };
    let f = FreeEnergyCurve::new(t, ctx.cfg.thermo.f_side, CurveKind::F, provenance, samples)?;
    let lda = lda_functional(&target, &f)?;
    let diff = (sandwich.midpoint() - lda.value).abs();
    let tolerance = 0.5 * sandwich.gap + lda.error;
    let mut rows = Vec::new();
    for &ell in &ctx.cfg.lda.ells {
        rows.push((ell, lda_error_rhs(&target, ell, ctx.cfg.lda.p, ctx.cfg.lda.b, 1.0)?));
    }
    let fitted_c = rows.iter().map(|(_, r)| pos_ratio(diff - tolerance, r.value)).fold(0.0, f64::max);
    let mut csv = String::from("ell,abs_diff,rhs\n");
    for (ell, r) in &rows {
        csv.push_str(&format!("{ell},{diff:.12e},{:.12e}\n", fitted_c * r.value));
    }
    let name = ctx.write_csv("lda_verify.csv", &csv)?;
    ctx.write_json(
        "lda_verify.json",
        json!({
            "G_lower": sandwich.lower,
            "G_upper": sandwich.upper,
            "lda": lda,
            "abs_diff": diff,
            "tolerance": tolerance,
            "fitted_c": fitted_c,
            "b_admissible": rows.iter().all(|(_, r)| r.b_admissible),
            "csv": name,
        }),
    )
}

fn pos_ratio(a: f64, b: f64) -> f64 {
    if a <= 0.0 {
        0.0
    } else {
        a / b
    }
}

fn ruelle_verify(ctx: &Context, draws: Option<usize>) -> CliResult<(Value, bool)> {
    let w = ctx.potential()?;
    let d = ctx.cfg.ensemble.lengths.len().max(1);
    let eps = ctx.cfg.ruelle.psi_exponent;
    let config = config_for_potential(&w, ctx.cfg.ruelle.split, eps, d)?;
    let draws = draws.unwrap_or(ctx.cfg.ruelle.draws);
    let scan = scan_pointwise_margin(&config, draws, ctx.cfg.seed);
    let t = ctx.cfg.ensemble.t;
    let zeta = config.zeta * config.scale;
    let mut checks = Vec::new();
    let mut ratios = Vec::new();
    let mut within = true;
    let mut mus = ctx.cfg.ruelle.mus.clone();
    if !mus.contains(&ctx.cfg.ensemble.mu) {
        mus.push(ctx.cfg.ensemble.mu);
    }
    for mu in mus {
        for side in [zeta, 2.0 * zeta] {
            let q = SimBox::cube(d, side);
            let domain = SimBox::new(vec![-side / 2.0; d], vec![2.0 * side; d])?;
            let spec = EnsembleSpec::chemical(t, mu, domain, w.clone());
            let mut o = ctx.gcmc_options();
            o.cubes = vec![q.clone()];
            let r = gcmc_run_with(&spec, &o)?;
            let n2 = r.cubes[0].n2;
            let z = (mu / t).exp();
            let shape = activity_shape(q.volume(), z, d, eps);
            let bound = moment_bound(side, t, mu, zeta, d, eps, None)?;
            within &= n2.value <= bound.n2_covered.min(bound.n2_polynomial) + 3.0 * n2.error;
            ratios.push(n2.value / shape);
            checks.push(json!({ "mu": mu, "side": side, "n2": n2, "shape": shape, "bound": bound, "ratio": n2.value / shape }));
        }
    }
    let fitted = ratios.iter().cloned().fold(0.0, f64::max);
    let pass = scan.min_margin >= -1e-9 && within;
    let report = json!({
        "feasible_config": config,
        "conditions": config.check_conditions(),
        "min_margin": scan.min_margin,
        "draws": scan.draws,
        "moment_checks": checks,
        "fitted_zeta": fitted,
        "pass": pass,
    });
    Ok((ctx.write_json("ruelle_verify.json", report)?, pass))
}

fn threads_from_env() -> CliResult<()> {
    if let Ok(v) = std::env::var("GIBBSFORGE_THREADS") {
        let n: usize = v.parse().map_err(|_| CliError::Usage(format!("GIBBSFORGE_THREADS must be a positive integer, got `{v}`")))?;
        if n == 0 {
            return usage("GIBBSFORGE_THREADS must be positive");
        }
        // A second initialisation in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Run a parsed command line and return the process exit status.
pub fn run(cli: &Cli) -> CliResult<i32> {
    threads_from_env()?;
    let start = Instant::now();
    let (report, pass) = match &cli.command {
        Command::PotentialCheck(o) => potential_check(&load(cli, Some(o))?)?,
        Command::GibbsExact(o) => (gibbs_exact(&load(cli, Some(o))?)?, true),
        Command::Gcmc { o, resume } => (gcmc(&load(cli, Some(o))?, resume.as_ref())?, true),
        Command::ThermoLimit(o) => (thermo_limit(&load(cli, Some(o))?)?, true),
        Command::LdaVerify { o, target } => (lda_verify(&load(cli, Some(o))?, target.as_ref())?, true),
        Command::DualSolve { o, target, tol } => (dual_solve(&load(cli, Some(o))?, target.as_ref(), *tol)?, true),
        Command::RuelleVerify { o, draws } => ruelle_verify(&load(cli, Some(o))?, *draws)?,
        Command::RateFit(o) => rate_fit(&load(cli, Some(o))?)?,
    };
    println!("{}", serde_json::to_string_pretty(&report).unwrap_or_default());
    let elapsed = start.elapsed().as_secs_f64();
    eprintln!("elapsed {elapsed:.2}s");
    if let Some(b) = cli.budget_seconds {
        if elapsed > b {
            eprintln!("budget of {b}s exceeded");
            return Ok(EXIT_RESOURCE);
        }
    }
    Ok(if pass { EXIT_OK } else { EXIT_FAILED_CHECK })
}

/// Parse arguments from an iterator and run; returns the exit status.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn main() -> ! {
    std::process::exit(run_from(std::env::args_os()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    fn args(dir: &Path, extra: &[&str]) -> Vec<String> {
        let mut a = vec!["gibbsforge".to_string()];
        a.extend(extra.iter().map(|s| s.to_string()));
        a.push("--out".into());
        a.push(dir.join("out").display().to_string());
        a
    }

    #[test]
    fn usage_errors_exit_64() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(run_from(args(dir.path(), &["no-such-command"])), EXIT_USAGE);
        let bad = write(dir.path(), "bad.toml", "[ensemble]\nunknown_key = 1\n");
        assert_eq!(run_from(args(dir.path(), &["gibbs-exact", "--config", bad.to_str().unwrap()])), EXIT_USAGE);
        assert_eq!(run_from(args(dir.path(), &["gibbs-exact"])), EXIT_USAGE);
    }

    #[test]
    fn shipped_lennard_jones_passes_potential_check() {
        let dir = tempfile::tempdir().unwrap();
        let pot = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/lennard_jones.toml");
        let code = run_from(args(dir.path(), &["potential-check", "--potential", pot]));
        assert_eq!(code, EXIT_OK);
        let report: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/potential_check.json")).unwrap()).unwrap();
        assert_eq!(report["regularity"]["pass"], true);
        assert!(report["provenance"]["config_hash"].as_str().unwrap().len() == 64);
    }

    #[test]
    fn reruns_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write(
            dir.path(),
            "run.toml",
            "seed = 3\n[potential]\nkind = \"soft_core\"\nkappa = 1.0\nr0 = 0.2\nalpha = 6.0\ns = 6.0\n[ensemble]\nlengths = [1.0]\n[gcmc]\nsweeps = 640\nburn_in = 64\n",
        );
        let c = cfg.to_str().unwrap();
        let read = |name: &str| std::fs::read(dir.path().join("out").join(name)).unwrap();
        assert_eq!(run_from(args(dir.path(), &["gcmc", "--config", c])), EXIT_OK);
        let first = (read("gcmc.json"), read("gcmc_profile.csv"));
        assert_eq!(run_from(args(dir.path(), &["gcmc", "--config", c])), EXIT_OK);
        assert_eq!(first, (read("gcmc.json"), read("gcmc_profile.csv")));
        assert_eq!(run_from(args(dir.path(), &["gibbs-exact", "--config", c])), EXIT_OK);
        let first = read("gibbs_exact_profile.csv");
        assert_eq!(run_from(args(dir.path(), &["gibbs-exact", "--config", c])), EXIT_OK);
        assert_eq!(first, read("gibbs_exact_profile.csv"));
        // A different seed changes the hash stamped into every file.
        assert_eq!(run_from(args(dir.path(), &["gcmc", "--config", c, "--seed", "4"])), EXIT_OK);
        assert_ne!(first, read("gcmc_profile.csv"));
    }

    #[test]
    fn resource_errors_exit_3() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write(
            dir.path(),
            "big.toml",
            "[potential]\nkind = \"zero\"\nkappa = 1.0\nr0 = 0.0\nalpha = 0.0\ns = 3.0\n[ensemble]\nlengths = [20.0]\n[exact]\nn_max = 60\norder = 16\n",
        );
        assert_eq!(run_from(args(dir.path(), &["gibbs-exact", "--config", cfg.to_str().unwrap()])), EXIT_RESOURCE);
    }

    #[test]
    fn lda_verify_on_a_constant_ideal_gas() {
        let dir = tempfile::tempdir().unwrap();
        let omega = SimBox::interval(0.0, 2.0);
        let profile = DensityProfile::constant(&omega, 0.5, 1.0).unwrap();
        write(dir.path(), "flat.csv", &profile.to_csv().unwrap());
        let cfg = dir.path().join("lda.toml");
        std::fs::write(
            &cfg,
            "[potential]\nkind = \"zero\"\nkappa = 1.0\nr0 = 0.0\nalpha = 0.0\ns = 3.0\n[exact]\nn_max = 24\norder = 2\npanels = 1\n[lda]\ntarget = \"flat.csv\"\n[dual]\ntol = 1e-10\n[thermo]\nf_side = 4.0\nmus = [-1.0, -0.875, -0.75, -0.625, -0.5, -0.375, -0.25, -0.125, 0.0, 0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875, 1.0]\n",
        )
        .unwrap();
        assert_eq!(run_from(args(dir.path(), &["lda-verify", "--config", cfg.to_str().unwrap()])), EXIT_OK);
        let report: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/lda_verify.json")).unwrap()).unwrap();
        assert!(report["abs_diff"].as_f64().unwrap() < 1e-6, "{report}");
    }
}
