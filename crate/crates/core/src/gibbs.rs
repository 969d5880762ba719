//! Grand-canonical Gibbs measures on a box: truncated partition functions by
//! tensor Gauss–Legendre quadrature, grand-canonical Metropolis sampling,
//! local moment estimators and zero-temperature minimisation.
//!
//! The exact path enumerates multisets of quadrature nodes once per
//! temperature and stores the Boltzmann weight of every occupation pattern of
//! the density bins. Any chemical potential or piecewise-constant external
//! potential on those bins is then a reweighting of the stored table.

use crate::configuration::{interaction_with, pair_sum_in, Configuration, SimBox};
use crate::error::{arg, Error, Result};
use crate::numerics::{batch_mean, composite_rule, log_sum_exp, Estimate};
use crate::potentials::{PairPotential, RepulsiveSplit, HARD_CORE_ENERGY};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::hash::{BuildHasherDefault, Hasher};

/// Piecewise-constant one-body potential on a uniform grid of the domain.
/// `values` is row-major with the last axis fastest; `+∞` forbids a cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalPotential {
    /// Declared lower bound `V >= -mu0`.
    pub mu0: f64,
    pub bins: Vec<usize>,
    pub values: Vec<f64>,
}

impl ExternalPotential {
    pub fn new(mu0: f64, bins: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let v = Self { mu0, bins, values };
        v.validate()?;
        Ok(v)
    }

    fn validate(&self) -> Result<()> {
        if self.bins.iter().product::<usize>() != self.values.len() || self.bins.contains(&0) {
            return arg("external potential needs one value per grid cell");
        }
        if self.values.iter().any(|v| v.is_nan() || *v < -self.mu0 - 1e-12) {
            return arg(format!("external potential must satisfy V >= -mu0 = {}", -self.mu0));
        }
        Ok(())
    }

    /// Flat cell index of a point of `domain`.
    pub fn cell_of(&self, domain: &SimBox, p: &[f64]) -> usize {
        let mut idx = 0;
        for (k, &nb) in self.bins.iter().enumerate() {
            let t = ((p[k] - domain.origin[k]) / domain.lengths[k] * nb as f64).floor();
            idx = idx * nb + (t.max(0.0) as usize).min(nb - 1);
        }
        idx
    }

    pub fn at(&self, domain: &SimBox, p: &[f64]) -> f64 {
        self.values[self.cell_of(domain, p)]
    }
}

/// Chemical potential or external potential.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Field {
    Chemical { mu: f64 },
    External(ExternalPotential),
}

/// Temperature, one-body field, domain and pair interaction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub t: f64,
    pub field: Field,
    pub domain: SimBox,
    pub potential: PairPotential,
}

impl EnsembleSpec {
    pub fn chemical(t: f64, mu: f64, domain: SimBox, potential: PairPotential) -> Self {
        Self { t, field: Field::Chemical { mu }, domain, potential }
    }

    pub fn external(t: f64, v: ExternalPotential, domain: SimBox, potential: PairPotential) -> Self {
        Self { t, field: Field::External(v), domain, potential }
    }

    pub fn d(&self) -> usize {
        self.domain.d()
    }

    /// One-body energy of a particle at `p`.
    pub fn one_body(&self, p: &[f64]) -> f64 {
        match &self.field {
            Field::Chemical { mu } => -mu,
            Field::External(v) => v.at(&self.domain, p),
        }
    }

    /// Same ensemble with the activity multiplied by `e^{shift}`.
    pub fn with_log_activity_shift(&self, shift: f64) -> Self {
        let mut out = self.clone();
        let dv = -self.t * shift;
        out.field = match &self.field {
            Field::Chemical { mu } => Field::Chemical { mu: mu - dv },
            Field::External(v) => Field::External(ExternalPotential {
                mu0: v.mu0 - dv,
                bins: v.bins.clone(),
                values: v.values.iter().map(|x| x + dv).collect(),
            }),
        };
        out
    }

    /// `∫_Ω e^{-βV}`.
    pub fn boltzmann_volume(&self) -> f64 {
        let beta = 1.0 / self.t;
        match &self.field {
            Field::Chemical { mu } => (beta * mu).exp() * self.domain.volume(),
            Field::External(v) => {
                let cell = self.domain.volume() / v.values.len() as f64;
                v.values.iter().map(|x| (-beta * x).exp() * cell).sum()
            }
        }
    }

    /// `log z_b = -βV_b` on a uniform grid with `panels` cells per axis.
    fn log_activity(&self, panels: usize) -> Result<Vec<f64>> {
        let beta = 1.0 / self.t;
        let m = panels.pow(self.d() as u32);
        match &self.field {
            Field::Chemical { mu } => Ok(vec![beta * mu; m]),
            Field::External(v) => {
                if v.bins.iter().any(|&b| b != panels) {
                    return Err(Error::Resolution(format!(
                        "external potential grid {:?} must match {panels} panels per axis",
                        v.bins
                    )));
                }
                Ok(v.values.iter().map(|x| -beta * x).collect())
            }
        }
    }
}

const BITS_PER_BIN: u32 = 6;
/// Largest number of bins a packed occupation key holds.
pub const MAX_BINS: usize = 21;
/// Largest particle number a packed occupation key holds.
pub const MAX_N: usize = 63;
/// Multisets of quadrature nodes enumerated at most.
pub const EXACT_BUDGET: f64 = 1e9;
/// Reduced energies above this are dropped when the interaction is nonnegative.
const PRUNE_BETA_H: f64 = 60.0;

#[derive(Default)]
struct KeyHasher(u64);

impl Hasher for KeyHasher {
    fn finish(&self) -> u64 {
        self.0
    }
    fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 = (self.0.rotate_left(5) ^ *b as u64).wrapping_mul(0x51_7c_c1_b7_27_22_0a_95);
        }
    }
    fn write_u128(&mut self, v: u128) {
        let x = (v as u64) ^ ((v >> 64) as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        self.0 = (x ^ (x >> 29)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    }
}

type KeyMap = HashMap<u128, f64, BuildHasherDefault<KeyHasher>>;

fn unpack(key: u128, bins: usize, out: &mut [u32]) {
    for (b, slot) in out.iter_mut().enumerate().take(bins) {
        *slot = ((key >> (BITS_PER_BIN as usize * b)) & 0x3f) as u32;
    }
}

/// `C(k + n, n)`, the number of multisets of size at most `n` from `k` nodes.
pub fn multiset_count(k: usize, n: usize) -> f64 {
    (1..=n).map(|i| (k + i) as f64 / i as f64).product()
}

/// Boltzmann weight of every bin occupation pattern, summed over quadrature
/// nodes: `W(m) = Σ_{multisets with bin counts m} Π w_a / Π mult! · e^{-βH}`.
#[derive(Debug, Clone)]
pub struct OccupancyTable {
    pub d: usize,
    pub panels: usize,
    pub beta: f64,
    pub n_max: usize,
    pub order: usize,
    pub domain: SimBox,
    /// `(packed counts, ln W)`, sorted by key.
    entries: Vec<(u128, f64)>,
}

struct Enumerator<'a> {
    k: usize,
    beta_w: &'a [f64],
    weights: &'a [f64],
    bin_shift: &'a [u128],
    n_max: usize,
    prune: bool,
    chosen: Vec<usize>,
    map: KeyMap,
}

impl Enumerator<'_> {
    fn descend(&mut self, start: usize, key: u128, beta_h: f64, weight: f64, mult: usize) {
        *self.map.entry(key).or_insert(0.0) += weight * (-beta_h).exp();
        if self.chosen.len() == self.n_max {
            return;
        }
        for a in start..self.k {
            let row = &self.beta_w[a * self.k..(a + 1) * self.k];
            let mut dh = 0.0;
            for &c in &self.chosen {
                dh += row[c];
            }
            let bh = beta_h + dh;
            if !bh.is_finite() || bh >= 1e200 || (self.prune && bh > PRUNE_BETA_H) {
                continue;
            }
            let m = if self.chosen.last() == Some(&a) { mult + 1 } else { 1 };
            self.chosen.push(a);
            self.descend(a, key + self.bin_shift[a], bh, weight * self.weights[a] / m as f64, m);
            self.chosen.pop();
        }
    }
}

impl OccupancyTable {
    /// Enumerate multisets of up to `n_max` nodes of a composite rule with
    /// `panels` panels of `order` Gauss–Legendre nodes per axis.
    pub fn build(
        domain: &SimBox,
        w: &PairPotential,
        beta: f64,
        panels: usize,
        order: usize,
        n_max: usize,
    ) -> Result<Self> {
        let d = domain.d();
        let bins = panels.pow(d as u32);
        if bins > MAX_BINS || n_max > MAX_N {
            return Err(Error::Resource(format!(
                "at most {MAX_BINS} bins and {MAX_N} particles fit an occupation key"
            )));
        }
        if panels == 0 || order == 0 {
            return arg("panels and order must be positive");
        }
        let per_axis: Vec<(Vec<f64>, Vec<f64>, Vec<usize>)> = (0..d)
            .map(|k| composite_rule(domain.origin[k], domain.upper(k), panels, order))
            .collect();
        let m1 = panels * order;
        let k = m1.pow(d as u32);
        let count = multiset_count(k, n_max);
        if count > EXACT_BUDGET {
            return Err(Error::Resource(format!(
                "{count:.3e} quadrature multisets exceed the budget {EXACT_BUDGET:.0e}; use gcmc"
            )));
        }
        let mut pts = vec![0.0; k * d];
        let mut weights = vec![1.0; k];
        let mut bin_shift = vec![0u128; k];
        for a in 0..k {
            let mut rem = a;
            let mut bin = 0;
            let mut idx = vec![0; d];
            for axis in (0..d).rev() {
                idx[axis] = rem % m1;
                rem /= m1;
            }
            for axis in 0..d {
                let (x, wt, p) = &per_axis[axis];
                pts[a * d + axis] = x[idx[axis]];
                weights[a] *= wt[idx[axis]];
                bin = bin * panels + p[idx[axis]];
            }
            bin_shift[a] = 1u128 << (BITS_PER_BIN as usize * bin);
        }
        let mut beta_w = vec![0.0; k * k];
        for a in 0..k {
            for c in 0..k {
                let r = domain.separation(&pts[a * d..(a + 1) * d], &pts[c * d..(c + 1) * d]);
                let v = w.value(r);
                beta_w[a * k + c] = if v >= HARD_CORE_ENERGY { f64::INFINITY } else { beta * v };
            }
        }
        let prune = w.is_nonnegative();
        let partial: Vec<KeyMap> = (0..k)
            .into_par_iter()
            .map(|a| {
                let mut e = Enumerator {
                    k,
                    beta_w: &beta_w,
                    weights: &weights,
                    bin_shift: &bin_shift,
                    n_max,
                    prune,
                    chosen: vec![a],
                    map: KeyMap::default(),
                };
                if n_max > 0 {
                    e.descend(a, bin_shift[a], 0.0, weights[a], 1);
                }
                e.map
            })
            .collect();
        let mut total: BTreeMap<u128, f64> = BTreeMap::new();
        total.insert(0, 1.0);
        for map in partial {
            let mut items: Vec<(u128, f64)> = map.into_iter().collect();
            items.sort_by_key(|(key, _)| *key);
            for (key, v) in items {
                *total.entry(key).or_insert(0.0) += v;
            }
        }
        let entries = total.into_iter().filter(|(_, v)| *v > 0.0).map(|(key, v)| (key, v.ln())).collect();
        Ok(Self { d, panels, beta, n_max, order, domain: domain.clone(), entries })
    }

    pub fn bins(&self) -> usize {
        self.panels.pow(self.d as u32)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Moments under bin activities `log z_b`; `-∞` empties a bin.
    pub fn evaluate(&self, log_activity: &[f64]) -> TableMoments {
        let m = self.bins();
        let mut counts = vec![0u32; m];
        let expo: Vec<f64> = self
            .entries
            .iter()
            .map(|(key, lw)| {
                unpack(*key, m, &mut counts);
                let mut e = *lw;
                for b in 0..m {
                    if counts[b] > 0 {
                        e += counts[b] as f64 * log_activity[b];
                    }
                }
                e
            })
            .collect();
        let log_z = log_sum_exp(&expo);
        let mut mean = vec![0.0; m];
        let mut second = vec![0.0; m * m];
        let mut n_dist = vec![0.0; self.n_max + 1];
        for ((key, _), e) in self.entries.iter().zip(&expo) {
            let p = (e - log_z).exp();
            if p == 0.0 {
                continue;
            }
            unpack(*key, m, &mut counts);
            let n: u32 = counts.iter().sum();
            n_dist[n as usize] += p;
            for b in 0..m {
                if counts[b] == 0 {
                    continue;
                }
                mean[b] += p * counts[b] as f64;
                for c in 0..m {
                    second[b * m + c] += p * (counts[b] * counts[c]) as f64;
                }
            }
        }
        TableMoments { log_z, mean, second, n_distribution: n_dist }
    }
}

/// Bin-resolved moments of a table at fixed activities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableMoments {
    pub log_z: f64,
    /// `⟨n_b⟩`
    pub mean: Vec<f64>,
    /// `⟨n_b n_c⟩`, row-major.
    pub second: Vec<f64>,
    /// `P(n)` for `n = 0..=n_max`.
    pub n_distribution: Vec<f64>,
}

impl TableMoments {
    pub fn mean_n(&self) -> f64 {
        self.mean.iter().sum()
    }

    pub fn mean_n2(&self) -> f64 {
        self.second.iter().sum()
    }

    /// `Cov(n_b, n_c)`, row-major.
    pub fn covariance(&self) -> Vec<f64> {
        let m = self.mean.len();
        (0..m * m).map(|i| self.second[i] - self.mean[i / m] * self.mean[i % m]).collect()
    }
}

/// Options of the exact path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExactOptions {
    pub n_max: usize,
    pub order: usize,
    /// Panels per axis; also the density bins.
    pub panels: usize,
    /// Rebuild at `order - 1` to estimate the quadrature error.
    pub error_estimate: bool,
}

impl ExactOptions {
    pub fn new(n_max: usize, order: usize, d: usize) -> Self {
        let panels = if d == 1 { 8 } else { 3 };
        Self { n_max, order, panels, error_estimate: order > 1 }
    }
}

/// Truncated partition function with certified truncation tail and
/// quadrature error estimate from successive orders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactResult {
    pub log_z: f64,
    /// `|log Z(order) - log Z(order - 1)|`.
    pub quadrature_error: f64,
    pub truncation_n: usize,
    /// Bound on `Σ_{n > n_max} term_n / Z`, an upper bound on the omitted part of `log Z`.
    pub tail_bound: f64,
    pub mean_n: f64,
    pub mean_n2: f64,
    pub panels: usize,
    /// `⟨n_b⟩` per density bin.
    pub bin_mean: Vec<f64>,
    /// `⟨n_b n_c⟩`.
    pub bin_second: Vec<f64>,
    /// Bin-wise change between successive orders.
    pub bin_mean_error: Vec<f64>,
    pub n_distribution: Vec<f64>,
    pub domain: SimBox,
}

impl ExactResult {
    pub fn var_n(&self) -> f64 {
        self.mean_n2 - self.mean_n * self.mean_n
    }

    /// Density `⟨n_b⟩/|bin|`.
    pub fn density(&self) -> Vec<f64> {
        let cell = self.domain.volume() / self.bin_mean.len() as f64;
        self.bin_mean.iter().map(|m| m / cell).collect()
    }

    pub fn expectations(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        out.insert("n".to_string(), self.mean_n);
        out.insert("n2".to_string(), self.mean_n2);
        out.insert("var_n".to_string(), self.var_n());
        for (b, rho) in self.density().iter().enumerate() {
            out.insert(format!("rho_{b:02}"), *rho);
        }
        out
    }

    /// Box of density bin `b`.
    pub fn bin_box(&self, b: usize) -> SimBox {
        let d = self.domain.d();
        let mut idx = vec![0; d];
        let mut rem = b;
        for axis in (0..d).rev() {
            idx[axis] = rem % self.panels;
            rem /= self.panels;
        }
        let lengths: Vec<f64> = self.domain.lengths.iter().map(|l| l / self.panels as f64).collect();
        let origin = (0..d).map(|k| self.domain.origin[k] + idx[k] as f64 * lengths[k]).collect();
        SimBox { origin, lengths, boundary: self.domain.boundary }
    }
}

/// `Σ_{n > n_max} x^n/n!` bounded by its first term times a geometric factor.
fn poisson_tail(x: f64, n_max: usize) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let n1 = (n_max + 1) as f64;
    if x >= n1 + 1.0 {
        return f64::INFINITY;
    }
    let log_first = n1 * x.ln() - crate::numerics::ln_factorial(n_max + 1);
    log_first.exp() / (1.0 - x / (n1 + 1.0))
}

pub fn exact_partition(spec: &EnsembleSpec, n_max: usize, order: usize) -> Result<ExactResult> {
    exact_partition_with(spec, &ExactOptions::new(n_max, order, spec.d()))
}

pub fn exact_partition_with(spec: &EnsembleSpec, opts: &ExactOptions) -> Result<ExactResult> {
    if spec.t == 0.0 {
        return Err(Error::Unsupported("T = 0 has no partition function; use ground_state".into()));
    }
    if !(spec.t > 0.0) {
        return arg("temperature must be positive");
    }
    let beta = 1.0 / spec.t;
    let la = spec.log_activity(opts.panels)?;
    let table = OccupancyTable::build(&spec.domain, &spec.potential, beta, opts.panels, opts.order, opts.n_max)?;
    let mom = table.evaluate(&la);
    let (quadrature_error, bin_mean_error) = if opts.error_estimate && opts.order > 1 {
        let coarse =
            OccupancyTable::build(&spec.domain, &spec.potential, beta, opts.panels, opts.order - 1, opts.n_max)?
                .evaluate(&la);
        (
            (mom.log_z - coarse.log_z).abs(),
            mom.mean.iter().zip(&coarse.mean).map(|(a, b)| (a - b).abs()).collect(),
        )
    } else {
        (0.0, vec![0.0; mom.mean.len()])
    };
    let x = (beta * spec.potential.stability_bound()).exp() * spec.boltzmann_volume();
    Ok(ExactResult {
        log_z: mom.log_z,
        quadrature_error,
        truncation_n: opts.n_max,
        tail_bound: poisson_tail(x, opts.n_max) / mom.log_z.exp(),
        mean_n: mom.mean_n(),
        mean_n2: mom.mean_n2(),
        panels: opts.panels,
        bin_mean: mom.mean.clone(),
        bin_second: mom.second.clone(),
        bin_mean_error,
        n_distribution: mom.n_distribution,
        domain: spec.domain.clone(),
    })
}

/// Acceptance fractions per move type.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Acceptance {
    pub insert: f64,
    pub delete: f64,
    pub displace: f64,
}

/// `⟨e^{(β/2) h_Q}⟩` estimated from a heavy-tailed sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpObservable {
    pub log_value: f64,
    /// Standard error relative to the value.
    pub relative_error: f64,
    /// The top 1% of samples carry more than half of the sum.
    pub clipped: bool,
    /// `(n_Q, samples, mean)` per stratum.
    pub strata: Vec<(usize, usize, f64)>,
}

/// Estimators on one tracked cube.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubeStats {
    pub cube: SimBox,
    pub n: Estimate,
    pub n2: Estimate,
    pub exp_half_h: Option<ExpObservable>,
}

/// Resumable chain state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainState {
    pub configuration: Configuration,
    pub step: f64,
    pub seed: u64,
    /// ChaCha word position, decimal.
    pub rng_word_pos: String,
    pub sweeps_done: usize,
    /// Moves per sweep, frozen after burn-in.
    pub moves_per_sweep: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainStats {
    pub n_samples: usize,
    pub acceptance: Acceptance,
    /// Integrated autocorrelation time of `n`, in sweeps.
    pub tau_int: f64,
    pub n: Estimate,
    pub n2: Estimate,
    pub var_n: Estimate,
    pub cubes: Vec<CubeStats>,
    pub density_bins: usize,
    pub density: Vec<Estimate>,
    pub pair_edges: Vec<f64>,
    /// Mean number of pairs per distance bin.
    pub pair_counts: Vec<f64>,
    /// No accepted move after burn-in, or a constant particle number.
    pub degenerate: bool,
    pub state: ChainState,
}

/// Options of a grand-canonical chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcmcOptions {
    pub sweeps: usize,
    pub burn_in: usize,
    pub seed: u64,
    /// Cubes whose occupation moments are estimated; the domain when empty.
    pub cubes: Vec<SimBox>,
    /// Split used for `h_Q` in the exponential observable.
    pub exp_split: Option<RepulsiveSplit>,
    /// Density bins per axis.
    pub density_bins: usize,
    pub pair_bins: usize,
    pub pair_rmax: f64,
    pub batches: usize,
    pub resume: Option<ChainState>,
}

impl GcmcOptions {
    pub fn new(sweeps: usize, burn_in: usize, seed: u64) -> Self {
        Self {
            sweeps,
            burn_in,
            seed,
            cubes: Vec::new(),
            exp_split: None,
            density_bins: 8,
            pair_bins: 0,
            pair_rmax: 1.0,
            batches: 32,
            resume: None,
        }
    }
}

pub fn gcmc_run(spec: &EnsembleSpec, sweeps: usize, burn_in: usize, seed: u64) -> Result<ChainStats> {
    gcmc_run_with(spec, &GcmcOptions::new(sweeps, burn_in, seed))
}

struct Chain<'a> {
    spec: &'a EnsembleSpec,
    beta: f64,
    cfg: Configuration,
    step: f64,
    tried: [u64; 3],
    accepted: [u64; 3],
    /// Fixed sweep length while sampling; `None` scales with `n` during burn-in.
    /// Sampling after a state-dependent number of moves biases toward small `n`.
    moves: Option<usize>,
}

impl Chain<'_> {
    fn energy_of(&self, p: &[f64], skip: Option<usize>) -> f64 {
        interaction_with(&self.cfg, p, skip, &self.spec.potential, &self.spec.domain)
    }

    fn accept<R: Rng>(&self, rng: &mut R, log_ratio: f64) -> bool {
        log_ratio >= 0.0 || rng.gen::<f64>().ln() < log_ratio
    }

    fn try_move<R: Rng>(&mut self, rng: &mut R) {
        let dom = &self.spec.domain;
        let vol = dom.volume();
        let n = self.cfg.len();
        match rng.gen_range(0..4) {
            0 => {
                self.tried[0] += 1;
                let p = dom.random_point(rng);
                let de = self.energy_of(&p, None) + self.spec.one_body(&p);
                if de >= HARD_CORE_ENERGY || !de.is_finite() {
                    return;
                }
                let lr = vol.ln() - ((n + 1) as f64).ln() - self.beta * de;
                if self.accept(rng, lr) {
                    self.cfg.push(&p);
                    self.accepted[0] += 1;
                }
            }
            1 => {
                self.tried[1] += 1;
                if n == 0 {
                    return;
                }
                let i = rng.gen_range(0..n);
                let p = self.cfg.point(i).to_vec();
                let de = -(self.energy_of(&p, Some(i)) + self.spec.one_body(&p));
                let lr = (n as f64).ln() - vol.ln() - self.beta * de;
                if self.accept(rng, lr) {
                    self.cfg.swap_remove(i);
                    self.accepted[1] += 1;
                }
            }
            _ => {
                self.tried[2] += 1;
                if n == 0 {
                    return;
                }
                let i = rng.gen_range(0..n);
                let old = self.cfg.point(i).to_vec();
                let mut new = old.clone();
                for (k, x) in new.iter_mut().enumerate() {
                    *x += self.step * (2.0 * rng.gen::<f64>() - 1.0);
                    if dom.boundary == crate::configuration::Boundary::Periodic {
                        let l = dom.lengths[k];
                        *x = dom.origin[k] + (*x - dom.origin[k]).rem_euclid(l);
                    }
                }
                if !dom.contains(&new) {
                    return;
                }
                let e_new = self.energy_of(&new, Some(i)) + self.spec.one_body(&new);
                if e_new >= HARD_CORE_ENERGY || !e_new.is_finite() {
                    return;
                }
                let e_old = self.energy_of(&old, Some(i)) + self.spec.one_body(&old);
                if self.accept(rng, -self.beta * (e_new - e_old)) {
                    self.cfg.set_point(i, &new);
                    self.accepted[2] += 1;
                }
            }
        }
    }

    fn sweep<R: Rng>(&mut self, rng: &mut R) {
        let moves = self.moves.unwrap_or((2 * self.cfg.len()).max(8));
        for _ in 0..moves {
            self.try_move(rng);
        }
    }
}

fn density_bin(domain: &SimBox, bins: usize, p: &[f64]) -> usize {
    let mut idx = 0;
    for k in 0..domain.d() {
        let t = ((p[k] - domain.origin[k]) / domain.lengths[k] * bins as f64).floor();
        idx = idx * bins + (t.max(0.0) as usize).min(bins - 1);
    }
    idx
}

fn exp_observable(samples: &[(usize, f64)]) -> ExpObservable {
    let logs: Vec<f64> = samples.iter().map(|s| s.1).collect();
    let n = logs.len() as f64;
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let est = batch_mean(&scaled, 32);
    let log_value = log_sum_exp(&logs) - n.ln();
    let mut sorted = scaled.clone();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let k = (sorted.len() as f64 / 100.0).ceil() as usize;
    let total: f64 = sorted.iter().sum();
    let head: f64 = sorted[..k.min(sorted.len())].iter().sum();
    let mut strata: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
    for (nq, l) in samples {
        let e = strata.entry(*nq).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += (l - top).exp();
    }
    ExpObservable {
        log_value,
        relative_error: est.error / est.value,
        clipped: head > 0.5 * total,
        strata: strata.into_iter().map(|(nq, (c, s))| (nq, c, s / c as f64 * top.exp())).collect(),
    }
}

/// Grand-canonical Metropolis chain with insertion, deletion and
/// displacement moves in ratio 1:1:2. One sweep is `max(8, 2⟨n⟩)` moves with
/// `⟨n⟩` from the second half of burn-in; observables are recorded once per
/// sweep after burn-in.
pub fn gcmc_run_with(spec: &EnsembleSpec, opts: &GcmcOptions) -> Result<ChainStats> {
    if !(spec.t > 0.0) {
        return arg("gcmc needs T > 0");
    }
    if opts.sweeps < 2 * opts.batches.max(2) {
        return arg("need at least two sweeps per batch");
    }
    let d = spec.d();
    let dom = &spec.domain;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (cfg, step, done, moves) = match &opts.resume {
        Some(state) => {
            rng = ChaCha8Rng::seed_from_u64(state.seed);
            let pos: u128 = state.rng_word_pos.parse().map_err(|_| Error::Argument("bad rng position".into()))?;
            rng.set_word_pos(pos);
            (state.configuration.clone(), state.step, state.sweeps_done, Some(state.moves_per_sweep.max(1)))
        }
        None => (Configuration::empty(d), 0.25 * dom.lengths.iter().cloned().fold(f64::INFINITY, f64::min), 0, None),
    };
    let mut chain = Chain { spec, beta: 1.0 / spec.t, cfg, step, tried: [0; 3], accepted: [0; 3], moves };
    let max_step = 0.5 * dom.lengths.iter().cloned().fold(f64::INFINITY, f64::min);
    let burn = if opts.resume.is_some() { 0 } else { opts.burn_in };
    let mut burn_n = 0usize;
    for s in 0..burn {
        chain.sweep(&mut rng);
        if 2 * s >= burn {
            burn_n += chain.cfg.len();
        }
        if s % 20 == 19 {
            let rate = chain.accepted[2] as f64 / chain.tried[2].max(1) as f64;
            chain.step = (chain.step * if rate > 0.4 { 1.2 } else { 0.8 }).clamp(1e-6, max_step);
            chain.tried[2] = 0;
            chain.accepted[2] = 0;
        }
    }
    if chain.moves.is_none() {
        let late = burn - burn / 2;
        let mean_n = if late > 0 { burn_n as f64 / late as f64 } else { chain.cfg.len() as f64 };
        chain.moves = Some(((2.0 * mean_n).round() as usize).max(8));
    }
    chain.tried = [0; 3];
    chain.accepted = [0; 3];

    let cubes: Vec<SimBox> = if opts.cubes.is_empty() { vec![dom.clone()] } else { opts.cubes.clone() };
    let nb = opts.density_bins.max(1);
    let n_bins = nb.pow(d as u32);
    let cell_volume = dom.volume() / n_bins as f64;
    let mut ns = Vec::with_capacity(opts.sweeps);
    let mut n2s = Vec::with_capacity(opts.sweeps);
    let mut cube_n: Vec<Vec<f64>> = vec![Vec::with_capacity(opts.sweeps); cubes.len()];
    let mut cube_h: Vec<Vec<(usize, f64)>> = vec![Vec::new(); cubes.len()];
    let mut dens: Vec<Vec<f64>> = vec![Vec::with_capacity(opts.sweeps); n_bins];
    let mut pairs = vec![0.0; opts.pair_bins];
    let mut counts = vec![0usize; n_bins];
    for _ in 0..opts.sweeps {
        chain.sweep(&mut rng);
        let n = chain.cfg.len() as f64;
        ns.push(n);
        n2s.push(n * n);
        for (c, q) in cubes.iter().enumerate() {
            let sub = chain.cfg.restrict(q);
            cube_n[c].push(sub.len() as f64);
            if let Some(split) = &opts.exp_split {
                let h = pair_sum_in(&sub, &split.repulsive_part(), dom);
                cube_h[c].push((sub.len(), 0.5 * chain.beta * h));
            }
        }
        counts.iter_mut().for_each(|c| *c = 0);
        for i in 0..chain.cfg.len() {
            counts[density_bin(dom, nb, chain.cfg.point(i))] += 1;
        }
        for (b, c) in counts.iter().enumerate() {
            dens[b].push(*c as f64 / cell_volume);
        }
        if opts.pair_bins > 0 {
            let width = opts.pair_rmax / opts.pair_bins as f64;
            for i in 0..chain.cfg.len() {
                for j in (i + 1)..chain.cfg.len() {
                    let r = dom.separation(chain.cfg.point(i), chain.cfg.point(j));
                    if r < opts.pair_rmax {
                        pairs[(r / width) as usize] += 1.0;
                    }
                }
            }
        }
    }
    let b = opts.batches;
    let n_est = batch_mean(&ns, b);
    let n2_est = batch_mean(&n2s, b);
    let mean = n_est.value;
    let centered: Vec<f64> = ns.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var_est = batch_mean(&centered, b);
    let tau_int = if var_est.value > 0.0 {
        0.5 * ns.len() as f64 * n_est.error * n_est.error / var_est.value
    } else {
        f64::INFINITY
    };
    let rate = |k: usize| chain.accepted[k] as f64 / chain.tried[k].max(1) as f64;
    let cube_stats = cubes
        .iter()
        .enumerate()
        .map(|(c, q)| {
            let sq: Vec<f64> = cube_n[c].iter().map(|x| x * x).collect();
            CubeStats {
                cube: q.clone(),
                n: batch_mean(&cube_n[c], b),
                n2: batch_mean(&sq, b),
                exp_half_h: if cube_h[c].is_empty() { None } else { Some(exp_observable(&cube_h[c])) },
            }
        })
        .collect();
    let sweeps = opts.sweeps as f64;
    let pair_edges = (0..=opts.pair_bins).map(|i| i as f64 * opts.pair_rmax / opts.pair_bins.max(1) as f64).collect();
    let degenerate = chain.accepted.iter().sum::<u64>() == 0 || ns.iter().all(|x| *x == ns[0]);
    Ok(ChainStats {
        n_samples: ns.len(),
        acceptance: Acceptance { insert: rate(0), delete: rate(1), displace: rate(2) },
        tau_int,
        n: n_est,
        n2: n2_est,
        var_n: var_est,
        cubes: cube_stats,
        density_bins: nb,
        density: dens.iter().map(|s| batch_mean(s, b)).collect(),
        pair_edges,
        pair_counts: pairs.iter().map(|p| p / sweeps).collect(),
        degenerate,
        state: ChainState {
            configuration: chain.cfg,
            step: chain.step,
            seed: match &opts.resume {
                Some(s) => s.seed,
                None => opts.seed,
            },
            rng_word_pos: rng.get_word_pos().to_string(),
            sweeps_done: done + burn + opts.sweeps,
            moves_per_sweep: chain.moves.unwrap_or(8),
        },
    })
}

/// Run `chains` independent chains with seeds `seed, seed+1, ...`.
pub fn gcmc_chains(spec: &EnsembleSpec, opts: &GcmcOptions, chains: usize) -> Result<Vec<ChainStats>> {
    (0..chains)
        .into_par_iter()
        .map(|c| {
            let mut o = opts.clone();
            o.seed = opts.seed.wrapping_add(c as u64);
            gcmc_run_with(spec, &o)
        })
        .collect()
}

/// `log Z` by thermodynamic integration in the activity scale `u`:
/// `log Z = ∫_0^1 ⟨n⟩_u / u du`, where `⟨n⟩_u` is the mean particle number
/// with the activity multiplied by `u`. The integrand is smooth on `[0, 1]`
/// and equals `∫ e^{-βV}` at `u = 0`. Gauss–Legendre nodes avoid `u = 0`;
/// every node runs an independent chain with seed `opts.seed + node`.
pub fn gcmc_log_partition(spec: &EnsembleSpec, opts: &GcmcOptions, nodes: usize) -> Result<Estimate> {
    let (us, ws, _) = composite_rule(0.0, 1.0, 1, nodes);
    let runs: Vec<Result<(f64, Estimate)>> = us
        .par_iter()
        .zip(ws.par_iter())
        .enumerate()
        .map(|(k, (u, w))| {
            let mut o = opts.clone();
            o.seed = opts.seed.wrapping_add(k as u64);
            o.resume = None;
            let st = gcmc_run_with(&spec.with_log_activity_shift(u.ln()), &o)?;
            Ok((*w / *u, st.n))
        })
        .collect();
    let mut value = 0.0;
    let mut var = 0.0;
    for r in runs {
        let (w, n) = r?;
        value += w * n.value;
        var += (w * n.error).powi(2);
    }
    Ok(Estimate::new(value, var.sqrt()))
}

/// Running combination of independent estimates weighted by sample count.
/// Merging is associative and commutative, so chains can be reduced in any
/// grouping.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pooled {
    pub weight: f64,
    pub weighted_sum: f64,
    pub weighted_var: f64,
}

impl Pooled {
    pub fn from_estimate(e: Estimate, samples: usize) -> Self {
        let w = samples as f64;
        Self { weight: w, weighted_sum: w * e.value, weighted_var: w * w * e.error * e.error }
    }

    pub fn merge(self, other: Self) -> Self {
        Self {
            weight: self.weight + other.weight,
            weighted_sum: self.weighted_sum + other.weighted_sum,
            weighted_var: self.weighted_var + other.weighted_var,
        }
    }

    pub fn estimate(&self) -> Estimate {
        Estimate::new(self.weighted_sum / self.weight, self.weighted_var.sqrt() / self.weight)
    }
}

/// Pool equally weighted independent estimates.
pub fn pool(estimates: &[Estimate]) -> Estimate {
    estimates.iter().map(|e| Pooled::from_estimate(*e, 1)).fold(Pooled::default(), Pooled::merge).estimate()
}

/// Source of occupation moments.
pub enum MomentSource<'a> {
    Chain(&'a ChainStats),
    Exact(&'a ExactResult),
}

/// `⟨n_Q^k⟩` for `k = 1, 2`. Chains report tracked cubes only; exact results
/// need `Q` to be a union of density bins.
pub fn moments_in_cube(source: MomentSource<'_>, q: &SimBox, k: usize) -> Result<Estimate> {
    if k != 1 && k != 2 {
        return arg("moment order must be 1 or 2");
    }
    match source {
        MomentSource::Chain(stats) => {
            let same = |a: &SimBox| {
                a.origin.iter().zip(&q.origin).all(|(x, y)| (x - y).abs() < 1e-12)
                    && a.lengths.iter().zip(&q.lengths).all(|(x, y)| (x - y).abs() < 1e-12)
            };
            let c = stats
                .cubes
                .iter()
                .find(|c| same(&c.cube))
                .ok_or_else(|| Error::Argument("cube was not tracked by the chain".into()))?;
            Ok(if k == 1 { c.n } else { c.n2 })
        }
        MomentSource::Exact(res) => {
            let m = res.bin_mean.len();
            let inside: Vec<usize> = (0..m).filter(|&b| q.contains_box(&res.bin_box(b))).collect();
            let covered: f64 = inside.iter().map(|&b| res.bin_box(b).volume()).sum();
            if (covered - q.volume()).abs() > 1e-9 * q.volume() {
                return Err(Error::Resolution("cube is not a union of density bins".into()));
            }
            let err: f64 = inside.iter().map(|&b| res.bin_mean_error[b]).sum::<f64>() + res.tail_bound;
            if k == 1 {
                Ok(Estimate::new(inside.iter().map(|&b| res.bin_mean[b]).sum(), err))
            } else {
                let v: f64 = inside.iter().flat_map(|&b| inside.iter().map(move |&c| (b, c))).map(|(b, c)| res.bin_second[b * m + c]).sum();
                Ok(Estimate::new(v, err * (1.0 + 2.0 * v.sqrt())))
            }
        }
    }
}

/// Best configuration found by multistart local descent at zero temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundState {
    pub n_opt: usize,
    pub points: Configuration,
    /// `H + Σ v(x_i)`, with `v = -μ` for a chemical potential.
    pub value: f64,
    /// Best value for each particle number.
    pub value_by_n: Vec<f64>,
    /// Fewer than two restarts reached the best value within `1e-6`.
    pub unconfirmed: bool,
}

fn free_energy_t0(spec: &EnsembleSpec, pts: &[f64]) -> f64 {
    let d = spec.d();
    let cfg = Configuration::free_points(d, pts.to_vec());
    let mut e = pair_sum_in(&cfg, &spec.potential, &spec.domain);
    for i in 0..cfg.len() {
        e += spec.one_body(cfg.point(i));
    }
    e
}

/// Coordinate pattern search in the domain; the step halves whenever no
/// coordinate move improves and the search ends below `1e-10` of the box.
/// Moves are scored by the moved particle's energy alone.
fn pattern_search(spec: &EnsembleSpec, pts: Vec<f64>) -> (Vec<f64>, f64) {
    let d = spec.d();
    let dom = &spec.domain;
    let mut cfg = Configuration::free_points(d, pts);
    let local = |cfg: &Configuration, i: usize, p: &[f64]| {
        interaction_with(cfg, p, Some(i), &spec.potential, dom) + spec.one_body(p)
    };
    let scale = dom.lengths.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut step = 0.25 * scale;
    let mut p = vec![0.0; d];
    while step > 1e-10 * scale {
        let mut improved = false;
        for i in 0..cfg.len() {
            for axis in 0..d {
                let (lo, hi) = (dom.origin[axis], dom.upper(axis) * (1.0 - 1e-15) - 1e-300);
                let before = local(&cfg, i, cfg.point(i));
                for sgn in [1.0, -1.0] {
                    p.copy_from_slice(cfg.point(i));
                    p[axis] = (p[axis] + sgn * step).clamp(lo, hi);
                    let after = local(&cfg, i, &p);
                    if after < before - 1e-12 * (1.0 + before.abs()) {
                        cfg.set_point(i, &p);
                        improved = true;
                        break;
                    }
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    let e = free_energy_t0(spec, &cfg.points);
    (cfg.points, e)
}

pub fn ground_state(spec: &EnsembleSpec, n_max: usize, restarts: usize, seed: u64) -> Result<GroundState> {
    if restarts == 0 {
        return arg("need at least one restart");
    }
    let d = spec.d();
    let per_n: Vec<(Vec<f64>, f64, usize)> = (0..=n_max)
        .into_par_iter()
        .map(|n| {
            if n == 0 {
                return (Vec::new(), 0.0, restarts);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(n as u64);
            let mut runs: Vec<(Vec<f64>, f64)> = (0..restarts)
                .map(|_| {
                    let mut pts = Vec::with_capacity(n * d);
                    for _ in 0..n {
                        pts.extend(spec.domain.random_point(&mut rng));
                    }
                    pattern_search(spec, pts)
                })
                .collect();
            runs.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
            let best = runs[0].1;
            let agree = runs.iter().filter(|r| r.1 <= best + 1e-6).count();
            (runs.swap_remove(0).0, best, agree)
        })
        .collect();
    let mut n_opt = 0;
    for (n, r) in per_n.iter().enumerate() {
        if r.1 < per_n[n_opt].1 - 1e-12 {
            n_opt = n;
        }
    }
    let (pts, value, agree) = per_n[n_opt].clone();
    Ok(GroundState {
        n_opt,
        points: Configuration::free_points(d, pts),
        value,
        value_by_n: per_n.iter().map(|r| r.1).collect(),
        unconfirmed: n_opt > 0 && agree < 2.min(restarts),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn unit() -> SimBox {
        SimBox::interval(0.0, 1.0)
    }

    fn ideal(mu: f64) -> EnsembleSpec {
        EnsembleSpec::chemical(1.0, mu, unit(), PairPotential::zero())
    }

    fn ideal_opts() -> ExactOptions {
        ExactOptions { n_max: 24, order: 1, panels: 4, error_estimate: false }
    }

    #[test]
    fn ideal_gas_exact_values() {
        let r = exact_partition_with(&ideal(0.0), &ideal_opts()).unwrap();
        assert_abs_diff_eq!(r.log_z, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.mean_n, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.mean_n2, 2.0, epsilon = 1e-12);
        assert!(r.tail_bound < 1e-20);
        let r2 = exact_partition_with(&ideal(2f64.ln()), &ideal_opts()).unwrap();
        assert_abs_diff_eq!(r2.log_z, 2.0, epsilon = 1e-12);
        for rho in r2.density() {
            assert_abs_diff_eq!(rho, 2.0, epsilon = 1e-9);
        }
        let q = SimBox::interval(0.0, 0.5);
        let m2 = moments_in_cube(MomentSource::Exact(&r), &q, 2).unwrap();
        assert_abs_diff_eq!(m2.value, 0.5 + 0.25, epsilon = 1e-12);
    }

    #[test]
    fn exact_rejections() {
        let mut s = ideal(0.0);
        s.t = 0.0;
        assert!(matches!(exact_partition(&s, 4, 4), Err(Error::Unsupported(_))));
        let s = EnsembleSpec::chemical(1.0, 0.0, unit(), PairPotential::soft_core(0.2, 6.0));
        assert!(matches!(exact_partition(&s, 30, 16), Err(Error::Resource(_))));
        let r = exact_partition_with(&ideal(0.0), &ideal_opts()).unwrap();
        assert!(matches!(
            moments_in_cube(MomentSource::Exact(&r), &SimBox::interval(0.0, 0.3), 1),
            Err(Error::Resolution(_))
        ));
    }

    #[test]
    fn minus_infinity_sentinel_is_empty() {
        let r = exact_partition_with(&ideal(f64::NEG_INFINITY), &ideal_opts()).unwrap();
        assert_eq!(r.log_z, 0.0);
        let m = moments_in_cube(MomentSource::Exact(&r), &unit(), 2).unwrap();
        assert_eq!(m.value, 0.0);
    }

    #[test]
    fn external_field_reweights_bins() {
        let v = ExternalPotential::new(1.0, vec![4], vec![-1.0, 0.0, f64::INFINITY, 0.5]).unwrap();
        let s = EnsembleSpec::external(1.0, v, unit(), PairPotential::zero());
        let r = exact_partition_with(&s, &ideal_opts()).unwrap();
        let expect = [1f64.exp(), 1.0, 0.0, (-0.5f64).exp()];
        for (b, e) in expect.iter().enumerate() {
            assert_abs_diff_eq!(r.bin_mean[b], 0.25 * e, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(r.log_z, 0.25 * expect.iter().sum::<f64>(), epsilon = 1e-12);
        assert!(ExternalPotential::new(0.5, vec![2], vec![-1.0, 0.0]).is_err());
    }

    /// Independent oracle: `Z = Σ_n z^n/n! ∫ e^{-βH}` with each
    /// configuration integral by plain Monte Carlo.
    fn mc_log_z(w: &PairPotential, mu: f64, n_max: usize, samples: usize) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut z = 1.0;
        let mut fact = 1.0;
        for n in 1..=n_max {
            fact *= n as f64;
            let mut acc = 0.0;
            for _ in 0..samples {
                let x: Vec<f64> = (0..n).map(|_| Rng::gen::<f64>(&mut rng)).collect();
                let mut h = 0.0;
                for i in 0..n {
                    for j in 0..i {
                        h += w.value((x[i] - x[j]).abs());
                    }
                }
                acc += (-h).exp();
            }
            z += (mu * n as f64).exp() / fact * acc / samples as f64;
        }
        z.ln()
    }

    #[test]
    fn soft_core_exact_matches_monte_carlo_oracle() {
        let w = PairPotential::soft_core(0.2, 6.0);
        let s = EnsembleSpec::chemical(1.0, 0.0, unit(), w.clone());
        let r = exact_partition_with(&s, &ExactOptions { n_max: 6, order: 6, panels: 4, error_estimate: true }).unwrap();
        let oracle = mc_log_z(&w, 0.0, 6, 200_000);
        assert!((r.log_z - oracle).abs() < 3e-3, "{} vs {}", r.log_z, oracle);
        assert!(r.quadrature_error < 1e-2);
        assert!(r.log_z >= 0.0);
    }

    #[test]
    fn gcmc_ideal_gas() {
        let st = gcmc_run(&ideal(0.0), 20_000, 500, 7).unwrap();
        assert!((st.n.value - 1.0).abs() < 3.0 * st.n.error, "{:?}", st.n);
        assert!((st.var_n.value - st.n.value).abs() < 0.05);
        assert!(!st.degenerate);
    }

    #[test]
    fn gcmc_is_deterministic_and_resumable() {
        let s = EnsembleSpec::chemical(1.0, 0.5, unit(), PairPotential::soft_core(0.2, 6.0));
        let a = gcmc_run(&s, 200, 50, 3).unwrap();
        let b = gcmc_run(&s, 200, 50, 3).unwrap();
        assert_eq!(a, b);
        let first = gcmc_run(&s, 100, 50, 3).unwrap();
        let json = serde_json::to_string(&first.state).unwrap();
        let mut o = GcmcOptions::new(100, 0, 0);
        o.resume = Some(serde_json::from_str(&json).unwrap());
        let rest = gcmc_run_with(&s, &o).unwrap();
        assert_eq!(rest.state.configuration, a.state.configuration);
        assert_eq!(rest.state.sweeps_done, 250);
    }

    /// Metropolis acceptance must reproduce the exact particle-number law.
    #[test]
    fn gcmc_detailed_balance_against_exact_distribution() {
        let w = PairPotential::soft_core(0.3, 6.0);
        let s = EnsembleSpec::chemical(1.0, 0.7, unit(), w);
        let ex = exact_partition_with(&s, &ExactOptions { n_max: 8, order: 6, panels: 4, error_estimate: false }).unwrap();
        let mut o = GcmcOptions::new(40_000, 1000, 11);
        o.density_bins = 4;
        o.cubes = vec![unit(), SimBox::interval(0.0, 0.5)];
        let st = gcmc_run_with(&s, &o).unwrap();
        assert!((st.n.value - ex.mean_n).abs() < 3.0 * st.n.error, "{:?} vs {}", st.n, ex.mean_n);
        assert!((st.n2.value - ex.mean_n2).abs() < 3.0 * st.n2.error);
        let half = SimBox::interval(0.0, 0.5);
        let a = moments_in_cube(MomentSource::Chain(&st), &half, 1).unwrap();
        let b = moments_in_cube(MomentSource::Exact(&ex), &half, 1).unwrap();
        assert!((a.value - b.value).abs() < 3.0 * a.error + b.error);
        for (bin, est) in st.density.iter().enumerate() {
            let exact = ex.density()[bin];
            assert!((est.value - exact).abs() < 3.5 * est.error, "bin {bin}: {est:?} vs {exact}");
        }
    }

    #[test]
    fn integrated_log_partition_matches_exact() {
        let s = EnsembleSpec::chemical(1.0, 0.5, unit(), PairPotential::soft_core(0.3, 6.0));
        let ex = exact_partition_with(&s, &ExactOptions { n_max: 10, order: 6, panels: 4, error_estimate: false }).unwrap();
        let mut o = GcmcOptions::new(20_000, 500, 21);
        o.density_bins = 1;
        let ti = gcmc_log_partition(&s, &o, 6).unwrap();
        assert!((ti.value - ex.log_z).abs() < 3.0 * ti.error + 1e-3, "{ti:?} vs {}", ex.log_z);
        let ideal = gcmc_log_partition(&ideal(0.0), &o, 6).unwrap();
        assert!((ideal.value - 1.0).abs() < 3.0 * ideal.error, "{ideal:?}");
    }

    #[test]
    fn exp_observable_flags_heavy_tails() {
        let mut samples: Vec<(usize, f64)> = (0..1000).map(|i| (i % 3, 0.0)).collect();
        assert!(!exp_observable(&samples).clipped);
        samples[0].1 = 20.0;
        let o = exp_observable(&samples);
        assert!(o.clipped);
        assert!(o.log_value > 10.0);
    }

    #[test]
    fn pooling_is_order_free() {
        let e = [Estimate::new(1.0, 0.1), Estimate::new(2.0, 0.2), Estimate::new(4.0, 0.3)];
        let mut r = e;
        r.reverse();
        assert_eq!(pool(&e), pool(&r));
        let p: Vec<Pooled> = e.iter().zip([10, 20, 30]).map(|(x, n)| Pooled::from_estimate(*x, n)).collect();
        let left = p[0].merge(p[1]).merge(p[2]).estimate();
        let right = p[0].merge(p[1].merge(p[2])).estimate();
        assert_abs_diff_eq!(left.value, right.value, epsilon = 1e-15);
        assert_abs_diff_eq!(left.error, right.error, epsilon = 1e-15);
        assert_abs_diff_eq!(left.value, (10.0 + 40.0 + 120.0) / 60.0, epsilon = 1e-15);
    }

    #[test]
    fn ground_state_examples() {
        let sc = PairPotential::soft_core(1.0, 6.0);
        let low = EnsembleSpec::chemical(0.0, -0.5, SimBox::interval(0.0, 3.0), sc.clone());
        let g = ground_state(&low, 4, 3, 1).unwrap();
        assert_eq!((g.n_opt, g.value), (0, 0.0));
        let free = EnsembleSpec::chemical(0.0, 0.5, unit(), PairPotential::zero());
        let g = ground_state(&free, 10, 2, 1).unwrap();
        assert_eq!(g.n_opt, 10);
        assert_abs_diff_eq!(g.value, -5.0, epsilon = 1e-12);
    }

    /// Oracle: exhaustive search over subsets of a 200-point grid.
    #[test]
    fn ground_state_matches_grid_search() {
        let sc = PairPotential::soft_core(1.0, 6.0);
        let spec = EnsembleSpec::chemical(0.0, 1.0, SimBox::interval(0.0, 3.0), sc.clone());
        let m = 200;
        let x: Vec<f64> = (0..m).map(|i| 3.0 * i as f64 / (m - 1) as f64).collect();
        let e: Vec<f64> = (0..m * m).map(|k| sc.value((x[k / m] - x[k % m]).abs())).collect();
        let mut best = 0.0f64;
        for i in 0..m {
            best = best.min(-1.0);
            for j in (i + 1)..m {
                let e2 = e[i * m + j];
                best = best.min(e2 - 2.0);
                for k in (j + 1)..m {
                    let e3 = e2 + e[i * m + k] + e[j * m + k];
                    best = best.min(e3 - 3.0);
                    if e3 > 1.0 {
                        continue;
                    }
                    for l in (k + 1)..m {
                        best = best.min(e3 + e[i * m + l] + e[j * m + l] + e[k * m + l] - 4.0);
                    }
                }
            }
        }
        let g = ground_state(&spec, 4, 6, 5).unwrap();
        assert!((g.value - best).abs() < 1e-3, "{} vs {}", g.value, best);
        assert_eq!(g.n_opt, 3);
        assert!(!g.unconfirmed);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn log_z_and_mean_nondecreasing_in_mu(mu in -3.0f64..2.0, dmu in 0.0f64..1.0) {
            let table = OccupancyTable::build(&unit(), &PairPotential::soft_core(0.25, 6.0), 1.0, 4, 3, 7).unwrap();
            let a = table.evaluate(&[mu; 4]);
            let b = table.evaluate(&[mu + dmu; 4]);
            prop_assert!(b.log_z >= a.log_z - 1e-12);
            prop_assert!(b.mean_n() >= a.mean_n() - 1e-12);
            prop_assert!(a.log_z >= 0.0);
            let var: f64 = a.covariance().iter().sum();
            prop_assert!(var >= -1e-9);
        }
    }
}
