//! Local moment bounds for superstable interactions: admissible scale
//! functions, the scale sequence, feasible constants, the pointwise energy
//! lower bound and the moment and exponential-moment bounds built on it.

use crate::configuration::{cross_energy, pair_sum, Configuration, SimBox};
use crate::error::{arg, Error, Result};
use crate::numerics::{bisect_last_true, integrate_to_infinity, log_sum_exp, neg, pos};
use crate::potentials::{
    lattice_tail_sum, log_grid, repulsive_split_with, stability_scan, tail_series_i, PairPotential, RepulsiveSplit, ScaleFunction,
    SplitRule, TailFunction,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::sync::{Mutex, OnceLock};

/// Outcome of the scale-function admissibility check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsiReport {
    pub pass: bool,
    pub reason: String,
    /// First `ℓ` where `ψ(ℓ+1)/ψ(ℓ) > (ℓ+1)/ℓ`, if any.
    pub ratio_witness: Option<u64>,
}

/// Check `ψ(ℓ+1)/ψ(ℓ) <= (ℓ+1)/ℓ` up to `range_max` and the convergence of
/// `Σ ψ(ℓ) φ(ℓ) ℓ^{d-1}` by comparison with `ℓ^{d-1+η-s}`.
pub fn validate_psi(psi: &ScaleFunction, phi: &TailFunction, d: usize, range_max: u64) -> PsiReport {
    for l in 1..range_max {
        let lf = l as f64;
        let ratio = psi.value(lf + 1.0) / psi.value(lf);
        if ratio > (lf + 1.0) / lf * (1.0 + 1e-14) || psi.value(lf) < 1.0 - 1e-14 {
            return PsiReport {
                pass: false,
                reason: format!("scale ratio {ratio} exceeds {} at l = {l}", (lf + 1.0) / lf),
                ratio_witness: Some(l),
            };
        }
    }
    if !phi.is_zero() {
        let eta = psi.growth_exponent(range_max as f64);
        if d as f64 - 1.0 + eta - phi.s >= -1.0 {
            return PsiReport {
                pass: false,
                reason: format!("series Σ ψ φ ℓ^(d-1) not certified: growth {eta} with tail exponent {}", phi.s),
                ratio_witness: None,
            };
        }
    }
    PsiReport { pass: true, reason: "admissible".into(), ratio_witness: None }
}

/// `ℓ_j = ⌊ℓ0 (1+2α)^j⌋` for `j = 0..=j_max`, with every step ratio in `[1+α, 1+3α]`.
pub fn scale_sequence(ell0: u64, alpha: f64, j_max: usize) -> Result<Vec<u64>> {
    if ell0 < 2 || !(alpha > 0.0) {
        return arg("scale_sequence needs ell0 >= 2 and alpha > 0");
    }
    let seq: Vec<u64> = (0..=j_max)
        .map(|j| (ell0 as f64 * (1.0 + 2.0 * alpha).powi(j as i32)).floor() as u64)
        .collect();
    for j in 0..j_max {
        let ratio = seq[j + 1] as f64 / seq[j] as f64;
        if ratio < 1.0 + alpha || ratio > 1.0 + 3.0 * alpha {
            return Err(Error::Infeasible(format!(
                "scale band violated at j = {j}: l_{} / l_{j} = {ratio} outside [{}, {}]",
                j + 1,
                1.0 + alpha,
                1.0 + 3.0 * alpha
            )));
        }
    }
    Ok(seq)
}

/// Number of band steps checked when choosing `ℓ0`.
const BAND_STEPS: usize = 40;

/// Largest `α` considered by [`feasible_constants`].
pub const ALPHA_CAP: f64 = 0.2;

/// Constants of the local moment construction, stored in rescaled units where
/// the repulsive range is `δ = √d`. Physical lengths are `scale` times unit lengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuelleConfig {
    pub d: usize,
    pub split: RepulsiveSplit,
    /// Stability constant of `w2`.
    pub kappa: f64,
    /// Tail bound in unit coordinates.
    pub phi: TailFunction,
    pub psi: ScaleFunction,
    pub alpha: f64,
    pub ell0: u64,
    /// Upper bound on the lattice sum `S`.
    pub lattice_sum: f64,
    /// Upper bound on `I(ℓ0)`.
    pub tail_series: f64,
    pub zeta: f64,
    /// `δ/√d`.
    pub scale: f64,
}

/// Outcome of substituting a config into the three feasibility conditions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionCheck {
    /// `(A/16)ψ(ℓ0) - (2κ+A)²/A`
    pub core_margin: f64,
    /// `A/16 - (4S²/A)((1+3α)^{d+1} - 1)`
    pub alpha_margin: f64,
    /// `(A/16)ψ(ℓ0) - 2^{d+2} S I(ℓ0) / (α^{d+1} A)`
    pub tail_margin: f64,
}

impl ConditionCheck {
    /// All margins nonnegative up to `rel` of the compared magnitudes.
    pub fn holds(&self, rel: f64, scale: f64) -> bool {
        [self.core_margin, self.alpha_margin, self.tail_margin]
            .iter()
            .all(|m| *m >= -rel * scale.max(1.0))
    }
}

fn core_condition(a: f64, kappa: f64, psi0: f64) -> f64 {
    a / 16.0 * psi0 - (2.0 * kappa + a).powi(2) / a
}

fn alpha_condition(a: f64, s: f64, alpha: f64, d: usize) -> f64 {
    a / 16.0 - 4.0 * s * s / a * ((1.0 + 3.0 * alpha).powi(d as i32 + 1) - 1.0)
}

fn tail_condition(a: f64, s: f64, i0: f64, alpha: f64, psi0: f64, d: usize) -> f64 {
    a / 16.0 * psi0 - 2f64.powi(d as i32 + 2) * s * i0 / (alpha.powi(d as i32 + 1) * a)
}

/// `φ'(r) = φ(c r)` bounded by a function of the same family.
fn rescale_tail(phi: &TailFunction, c: f64) -> TailFunction {
    if phi.is_zero() {
        return *phi;
    }
    // (1 + c r) >= min(c, 1)(1 + r)
    TailFunction::new(phi.b * c.min(1.0).powf(-phi.s), phi.s)
}

/// Stability constant of `w2`: zero when `w2 >= 0`, otherwise twice the
/// scanned lower witness.
pub fn stable_part_kappa(split: &RepulsiveSplit, d: usize) -> Result<f64> {
    if split.rule == SplitRule::Truncation && split.potential.is_nonnegative() {
        return Ok(0.0);
    }
    let scan = stability_scan(&split.stable_part(), d, 10, 24, 2.0 * split.delta.max(split.potential.r0), 17)?;
    Ok(2.0 * scan.kappa_hat + 1e-9)
}

/// Choose the largest `α <= ALPHA_CAP` on a geometric grid satisfying the
/// corridor condition, then the smallest `ℓ0` satisfying the core and tail
/// conditions together with the scale band, and compute `ζ`.
pub fn feasible_constants(split: &RepulsiveSplit, phi: &TailFunction, psi: &ScaleFunction, d: usize) -> Result<RuelleConfig> {
    let report = validate_psi(psi, phi, d, 10_000);
    if !report.pass {
        return Err(Error::Admissibility(report.reason));
    }
    let kappa = stable_part_kappa(split, d)?;
    feasible_constants_with_kappa(split, phi, psi, d, kappa)
}

/// Split `w` with `rule`, bound the negative part of the stable remainder by
/// the smallest tail of exponent `w.s` on a log grid, and construct feasible
/// constants for `ψ(ℓ) = ℓ^psi_exponent`.
pub fn config_for_potential(w: &PairPotential, rule: SplitRule, psi_exponent: f64, d: usize) -> Result<RuelleConfig> {
    let split = repulsive_split_with(w, rule)?;
    let grid = log_grid(split.delta, 1e3, 4000);
    let phi = TailFunction::fit_amplitude(&split.stable_part(), w.s, &grid);
    let phi = if phi.b > 0.0 { phi } else { TailFunction::zero() };
    feasible_constants(&split, &phi, &ScaleFunction::Power { exponent: psi_exponent }, d)
}

pub fn feasible_constants_with_kappa(
    split: &RepulsiveSplit,
    phi: &TailFunction,
    psi: &ScaleFunction,
    d: usize,
    kappa: f64,
) -> Result<RuelleConfig> {
    let a = split.a;
    let scale = split.delta / (d as f64).sqrt();
    let phi_u = rescale_tail(phi, scale);
    let lattice = lattice_tail_sum(&phi_u, d)?;
    let s = lattice.value + lattice.remainder;

    let alpha = (0..400)
        .map(|k| ALPHA_CAP * 0.95f64.powi(k))
        .find(|&al| alpha_condition(a, s, al, d) >= 0.0)
        .ok_or_else(|| Error::Infeasible("corridor condition on alpha fails on the whole grid".into()))?;

    let i_upper = |l0: u64| -> Result<f64> {
        let c = tail_series_i(&phi_u, psi, l0, d)?;
        Ok(c.value + c.remainder)
    };
    let ok_13 = |l0: u64| -> Result<bool> {
        let psi0 = psi.value(l0 as f64);
        Ok(core_condition(a, kappa, psi0) >= 0.0 && tail_condition(a, s, i_upper(l0)?, alpha, psi0, d) >= 0.0)
    };
    let mut hi = 2u64;
    while !ok_13(hi)? {
        hi = hi.checked_mul(2).filter(|h| *h < 1 << 40).ok_or_else(|| {
            Error::Infeasible("core and tail conditions never hold below 2^40".into())
        })?;
    }
    let mut lo = hi / 2;
    if hi == 2 {
        lo = 1;
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if ok_13(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let mut ell0 = hi;
    let mut tries = 0;
    while scale_sequence(ell0, alpha, BAND_STEPS).is_err() {
        ell0 += 1;
        tries += 1;
        if tries > 1_000_000 {
            return Err(Error::Infeasible("scale band never holds".into()));
        }
    }
    let i0 = i_upper(ell0)?;
    let psi0 = psi.value(ell0 as f64);
    let c = kappa + a / 2.0;
    let zeta = [
        2.0 * ell0 as f64 * scale,
        c,
        4f64.powi(d as i32 - 2) * a / alpha * scale.powi(-(d as i32)),
        16.0 / a,
        1.0,
    ]
    .into_iter()
    .fold(f64::NEG_INFINITY, f64::max);
    let _ = psi0;
    Ok(RuelleConfig {
        d,
        split: split.clone(),
        kappa,
        phi: phi_u,
        psi: *psi,
        alpha,
        ell0,
        lattice_sum: s,
        tail_series: i0,
        zeta,
        scale,
    })
}

impl RuelleConfig {
    pub fn a(&self) -> f64 {
        self.split.a
    }

    /// `C = κ + A/2`.
    pub fn c(&self) -> f64 {
        self.kappa + self.split.a / 2.0
    }

    pub fn ell(&self, j: usize) -> u64 {
        (self.ell0 as f64 * (1.0 + 2.0 * self.alpha).powi(j as i32)).floor() as u64
    }

    /// `V_j = (2ℓ_j)^d`.
    pub fn volume(&self, j: usize) -> f64 {
        (2.0 * self.ell(j) as f64).powi(self.d as i32)
    }

    pub fn psi_j(&self, j: usize) -> f64 {
        self.psi.value(self.ell(j) as f64)
    }

    /// Side of `Q0` in physical units.
    pub fn q0_side(&self) -> f64 {
        2.0 * self.ell0 as f64 * self.scale
    }

    /// Substitute the stored constants back into the three conditions.
    pub fn check_conditions(&self) -> ConditionCheck {
        let a = self.split.a;
        let psi0 = self.psi.value(self.ell0 as f64);
        ConditionCheck {
            core_margin: core_condition(a, self.kappa, psi0),
            alpha_margin: alpha_condition(a, self.lattice_sum, self.alpha, self.d),
            tail_margin: tail_condition(a, self.lattice_sum, self.tail_series, self.alpha, psi0, self.d),
        }
    }

    /// `(j, |A_j|/V_j, lower ok, upper ok)` for `j = 1..=j_max`, against
    /// `αd/2 <= |A_j|/V_j <= 3αd`.
    pub fn annulus_band(&self, j_max: usize) -> Vec<(usize, f64, bool, bool)> {
        let ad = self.alpha * self.d as f64;
        (1..=j_max)
            .map(|j| {
                let frac = (self.volume(j) - self.volume(j - 1)) / self.volume(j);
                (j, frac, frac >= ad / 2.0, frac <= 3.0 * ad)
            })
            .collect()
    }

    /// Largest `ψ_{j+1}/((1+3α)ψ_j)` over `j < j_max`; at most 1 when the
    /// scale function propagates along the sequence.
    pub fn psi_propagation(&self, j_max: usize) -> f64 {
        (0..j_max)
            .map(|j| self.psi_j(j + 1) / ((1.0 + 3.0 * self.alpha) * self.psi_j(j)))
            .fold(0.0, f64::max)
    }

    fn to_unit(&self, p: &[f64]) -> Vec<f64> {
        p.iter().map(|v| v / self.scale).collect()
    }

    /// Unit cell index of a physical point.
    fn cell(&self, p: &[f64]) -> Vec<i64> {
        self.to_unit(p).iter().map(|v| v.floor() as i64).collect()
    }

    /// Whether a physical point lies in the open cube `Q_j`.
    pub fn in_q(&self, j: usize, p: &[f64]) -> bool {
        let l = self.ell(j) as f64;
        self.to_unit(p).iter().all(|v| v.abs() < l)
    }

    /// Physical box `Q_j` (closure of the open cube).
    pub fn q_box(&self, j: usize) -> SimBox {
        SimBox::centered_cube(self.d, 2.0 * self.ell(j) as f64 * self.scale)
    }
}

/// `Σ_{C_i ⊂ Q_j} n_i(Y)²` for each `j = 0..=j_max`.
fn square_counts(y: &Configuration, config: &RuelleConfig, j_max: usize) -> Vec<f64> {
    let mut counts: BTreeMap<Vec<i64>, u64> = BTreeMap::new();
    for i in 0..y.len() {
        *counts.entry(config.cell(y.point(i))).or_insert(0) += 1;
    }
    (0..=j_max)
        .map(|j| {
            let l = config.ell(j) as i64;
            counts
                .iter()
                .filter(|(k, _)| k.iter().all(|&c| c >= -l && c < l))
                .map(|(_, &n)| (n * n) as f64)
                .sum()
        })
        .collect()
}

/// Index `j` of the first cube containing every cell occupied by `Y`.
fn covering_index(y: &Configuration, config: &RuelleConfig) -> usize {
    let mut reach = 0i64;
    for i in 0..y.len() {
        for c in config.cell(y.point(i)) {
            reach = reach.max(c + 1).max(-c);
        }
    }
    let mut j = 0;
    while (config.ell(j) as i64) < reach {
        j += 1;
    }
    j
}

/// Smallest `q >= 0` with `Σ_{C_i⊂Q_j} n_i(Y)² <= V_j ψ_j` for every `j > q`.
/// Past the covering cube the left side is constant and the right side grows.
pub fn q_index(y: &Configuration, config: &RuelleConfig) -> usize {
    let j_cover = covering_index(y, config) + 1;
    let sq = square_counts(y, config, j_cover);
    (1..=j_cover)
        .rev()
        .find(|&j| sq[j] > config.volume(j) * config.psi_j(j))
        .unwrap_or(0)
}

/// Both sides of the pointwise energy lower bound for `x ⊂ Q0` and `Y`
/// outside `Q0` (physical coordinates).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointwiseBound {
    pub lhs_value: f64,
    pub rhs_value: f64,
    pub q: usize,
    /// `lhs - rhs`, computed without the common `H(z)` term.
    pub margin: f64,
}

pub fn pointwise_lower_bound(x: &Configuration, y: &Configuration, config: &RuelleConfig) -> PointwiseBound {
    let w = &config.split.potential;
    let a = config.a();
    let q = q_index(y, config);
    let n = x.len() as f64;
    let h_x = pair_sum(x, &config.split.repulsive_part());
    let (inner, outer): (Vec<usize>, Vec<usize>) = if q > 0 {
        (0..y.len()).partition(|&i| config.in_q(q, y.point(i)))
    } else {
        (Vec::new(), (0..y.len()).collect())
    };
    let pick = |idx: &[usize]| {
        let mut c = Configuration::empty(config.d);
        for &i in idx {
            c.push(y.point(i));
        }
        c
    };
    let yy = pick(&inner);
    let z = pick(&outer);
    let xy = x.union(&yy);
    let h_z = pair_sum(&z, w);
    let lhs_reduced = pair_sum(&xy, w) + cross_energy(&xy, &z, w);
    let rhs_reduced = if q > 0 {
        let vq = config.volume(q);
        let k = yy.len() as f64;
        h_x / 2.0 + a / 16.0 * config.psi_j(q) * vq + a / (16.0 * vq) * k * k - config.c() * n
    } else {
        h_x / 2.0 - 4f64.powi(config.d as i32 - 2) * a / config.alpha * config.psi_j(0) * config.volume(0)
            - config.c() * n
    };
    PointwiseBound {
        lhs_value: lhs_reduced + h_z,
        rhs_value: rhs_reduced + h_z,
        q,
        margin: lhs_reduced - rhs_reduced,
    }
}

/// Random `(x, Y)` pair in physical coordinates exercising sparse outer
/// points, dense outer clusters that force `q > 0`, and points hugging the
/// boundary of `Q0`.
pub fn random_draw<R: Rng>(config: &RuelleConfig, rng: &mut R) -> (Configuration, Configuration) {
    let d = config.d;
    let sc = config.scale;
    let l0 = config.ell0 as f64;
    let mut x = Configuration::empty(d);
    let mut y = Configuration::empty(d);
    let mode = rng.gen_range(0..4);
    let nx = rng.gen_range(0..8);
    for _ in 0..nx {
        let p: Vec<f64> = if mode == 2 {
            (0..d).map(|_| sc * (l0 - rng.gen::<f64>() * 2.0) * if rng.gen() { 1.0 } else { -1.0 }).collect()
        } else {
            (0..d).map(|_| sc * l0 * (2.0 * rng.gen::<f64>() - 1.0)).collect()
        };
        x.push(&p);
    }
    // Points of Q_j \ Q_0 by rejection.
    let outer_point = |rng: &mut R, j: usize| -> Vec<f64> {
        let lj = config.ell(j) as f64;
        loop {
            let p: Vec<f64> = (0..d).map(|_| sc * lj * (2.0 * rng.gen::<f64>() - 1.0)).collect();
            if !config.in_q(0, &p) {
                return p;
            }
        }
    };
    let j_out = rng.gen_range(1..5);
    let sparse = rng.gen_range(0..30);
    for _ in 0..sparse {
        let p = outer_point(rng, j_out);
        y.push(&p);
    }
    match mode {
        1 | 3 => {
            // A cluster in one unit cell sized to violate the q-inequality at some j.
            let j = rng.gen_range(1..4);
            let target = (config.volume(j) * config.psi_j(j)).sqrt().ceil() as usize;
            let m = if mode == 1 { target + rng.gen_range(0..4) } else { rng.gen_range(1..=target.max(1)) };
            let anchor: Vec<f64> = outer_point(rng, j).iter().map(|v| (v / sc).floor()).collect();
            for _ in 0..m {
                let p: Vec<f64> = anchor.iter().map(|c| sc * (c + rng.gen::<f64>())).collect();
                if !config.in_q(0, &p) {
                    y.push(&p);
                }
            }
        }
        2 => {
            for _ in 0..rng.gen_range(0..10) {
                let p: Vec<f64> = (0..d)
                    .map(|_| sc * (l0 + rng.gen::<f64>() * 2.0) * if rng.gen() { 1.0 } else { -1.0 })
                    .collect();
                y.push(&p);
            }
        }
        _ => {}
    }
    (x, y)
}

/// Minimum margin over `draws` random pairs and the pair attaining it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarginScan {
    pub draws: usize,
    pub min_margin: f64,
    pub worst_q: usize,
    pub q_positive_draws: usize,
}

pub fn scan_pointwise_margin(config: &RuelleConfig, draws: usize, seed: u64) -> MarginScan {
    const CHUNK: usize = 1000;
    let chunks = draws.div_ceil(CHUNK);
    let parts: Vec<(f64, usize, usize)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let mut best = (f64::INFINITY, 0, 0);
            for _ in 0..CHUNK.min(draws - c * CHUNK) {
                let (x, y) = random_draw(config, &mut rng);
                let b = pointwise_lower_bound(&x, &y, config);
                if b.q > 0 {
                    best.2 += 1;
                }
                if b.margin < best.0 {
                    best.0 = b.margin;
                    best.1 = b.q;
                }
            }
            best
        })
        .collect();
    let mut out = MarginScan { draws, min_margin: f64::INFINITY, worst_q: 0, q_positive_draws: 0 };
    for (m, q, k) in parts {
        out.q_positive_draws += k;
        if m < out.min_margin {
            out.min_margin = m;
            out.worst_q = q;
        }
    }
    out
}

/// Constants of the rate `ξ_{T,μ}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct XiParams {
    pub c_t: f64,
    pub c_0: f64,
    /// `min(1, s-d)/2`
    pub eps: f64,
}

impl XiParams {
    pub fn for_tail(c_t: f64, c_0: f64, s: f64, d: usize) -> Self {
        Self { c_t, c_0, eps: (s - d as f64).min(1.0) / 2.0 }
    }
}

/// `C_T e^{μ/2T}(1 + e^{μd/(2Tε)})` for `T > 0`, `C_0 (C_0 + μ)_+^{1+d/ε}` at `T = 0`.
pub fn xi(t: f64, mu: f64, d: usize, params: &XiParams) -> f64 {
    let df = d as f64;
    if t > 0.0 {
        params.c_t * (mu / (2.0 * t)).exp() * (1.0 + (mu * df / (2.0 * t * params.eps)).exp())
    } else {
        params.c_0 * pos(params.c_0 + mu).powf(1.0 + df / params.eps)
    }
}

/// `ℛ = zL^d e^{βζ}/(βζ) + L^{d+ε} + (z/β)^{1+d/ε} + ((log β)_- + 1)/β`.
pub fn remainder_r(z: f64, beta: f64, zeta: f64, side: f64, d: usize, eps: f64) -> f64 {
    let df = d as f64;
    z * side.powf(df) * (beta * zeta).exp() / (beta * zeta)
        + side.powf(df + eps)
        + (z / beta).powf(1.0 + df / eps)
        + (neg(beta.ln()) + 1.0) / beta
}

/// The evaluated forms of the second-moment bound on a cube of side `L`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentBound {
    pub r: f64,
    /// `L^d min{z e^{ζβ(2ℛ+1)}, ζℛ}` on `⟨n_Q²⟩`.
    pub n2_polynomial: f64,
    /// The polynomial bound at side `ζ` propagated to `Q` by covering.
    pub n2_covered: f64,
    /// `(|Q| ξ)²` when `ξ` parameters are supplied.
    pub n2_xi: Option<f64>,
}

/// Second-moment bounds for a cube of side `side >= ζ` at temperature `t > 0`.
/// `eps` is the exponent of `ψ(ℓ) = ℓ^ε`.
pub fn moment_bound(
    side: f64,
    t: f64,
    mu: f64,
    zeta: f64,
    d: usize,
    eps: f64,
    xi_params: Option<&XiParams>,
) -> Result<MomentBound> {
    if side < zeta {
        return arg(format!("cube side {side} below zeta = {zeta}"));
    }
    if !(t > 0.0) {
        return arg("moment_bound needs T > 0; use t0_bounds at zero temperature");
    }
    let beta = 1.0 / t;
    let z = (beta * mu).exp();
    let df = d as f64;
    let poly = |l: f64| {
        let r = remainder_r(z, beta, zeta, l, d, eps);
        let first = z * (zeta * beta * (2.0 * r + 1.0)).exp();
        (r, l.powf(df) * first.min(zeta * r))
    };
    let (r, n2_polynomial) = poly(side);
    let k = (side / zeta).ceil().powf(df);
    let n2_covered = k * k * poly(zeta).1;
    let n2_xi = xi_params.map(|p| (side.powf(df) * xi(t, mu, d, p)).powi(2));
    Ok(MomentBound { r, n2_polynomial, n2_covered, n2_xi })
}

/// `|Q|² z (1 + z^{d/ε})`, the activity shape of the covered second moment.
pub fn activity_shape(volume: f64, z: f64, d: usize, eps: f64) -> f64 {
    volume * volume * z * (1.0 + z.powf(d as f64 / eps))
}

/// Smallest constant `C` with `n2 <= C·shape` over all samples `(n2, shape)`.
pub fn fit_shape_constant(samples: &[(f64, f64)]) -> f64 {
    samples.iter().map(|(n2, shape)| n2 / shape).fold(0.0, f64::max)
}

/// Logarithms of the exponential-moment bounds on `⟨e^{(β/2)h_Q}⟩`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpMomentBound {
    /// Explicit bound on `Q0` with the sum over the scale subsequence.
    pub log_subsequence: f64,
    /// Same with the sum over every integer `ℓ > ℓ0`.
    pub log_full: f64,
    /// Bound with `ζ` on a cube of side `L`.
    pub log_cube: f64,
    /// `L^d(e^{β(μ+ζ)} + 2ζβψ(L))`.
    pub log_simplified: f64,
}

fn log_sum_terms<F: Fn(f64) -> f64>(start: u64, log_term: F) -> f64 {
    // Terms eventually decrease; stop once they are far below the running total.
    let mut acc = f64::NEG_INFINITY;
    let mut prev = f64::INFINITY;
    let mut l = start;
    loop {
        let t = log_term(l as f64);
        acc = log_sum_exp(&[acc, t]);
        if (t < acc - 60.0 && t < prev) || l - start > 10_000_000 {
            return acc;
        }
        prev = t;
        l += 1;
    }
}

pub fn exp_moment_bound(side: f64, t: f64, mu: f64, config: &RuelleConfig) -> Result<ExpMomentBound> {
    if side < config.zeta {
        return arg(format!("cube side {side} below zeta = {}", config.zeta));
    }
    if !(t > 0.0) {
        return arg("exp_moment_bound needs T > 0");
    }
    let beta = 1.0 / t;
    let d = config.d as i32;
    let a = config.a();
    let c = config.c();
    // Activity in unit coordinates.
    let zu = (beta * mu).exp() * config.scale.powi(d);
    let v0 = config.volume(0);
    let lead = (beta * c).exp() * zu * v0;
    let first = beta * 4f64.powi(d - 2) * a / config.alpha * config.psi_j(0) * v0;
    let sub = {
        let mut terms = vec![first];
        let mut j = 1;
        loop {
            let vq = config.volume(j);
            let e = -beta * a / 16.0 * config.psi_j(j) * vq + zu * vq;
            terms.push(e);
            if (e < first - 60.0 && j > 3) || j > 2000 {
                break;
            }
            j += 1;
        }
        log_sum_exp(&terms)
    };
    let full_sum = log_sum_terms(config.ell0 + 1, |l| {
        -(2.0 * l).powi(d) * (beta * a / 16.0 * config.psi.value(l) - zu)
    });
    let z = (beta * mu).exp();
    let zeta = config.zeta;
    let ld = side.powi(d);
    let cube_sum = log_sum_terms(side.floor() as u64 + 1, |l| {
        -beta * (config.psi.value(l) / zeta - zeta * z) * l.powi(d)
    });
    let log_cube = ld * (beta * (mu + zeta)).exp() + log_sum_exp(&[zeta * beta * config.psi.value(side) * ld, cube_sum]);
    Ok(ExpMomentBound {
        log_subsequence: lead + sub,
        log_full: lead + log_sum_exp(&[first, full_sum]),
        log_cube,
        log_simplified: ld * ((beta * (mu + zeta)).exp() + 2.0 * zeta * beta * config.psi.value(side)),
    })
}

/// Constant `B` of the sum bound, calibrated once per `(d, ε)`.
fn sum_lemma_constant(d: usize, eps: f64) -> f64 {
    static CACHE: OnceLock<Mutex<HashMap<(usize, u64), f64>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(b) = cache.lock().unwrap().get(&(d, eps.to_bits())) {
        return *b;
    }
    let p = d as f64 + eps;
    // C with ∫_x^∞ e^{-t^p} dt <= C e^{-x^p/2} for x >= 0.
    let c_quad = (0..=400)
        .map(|i| {
            let x = i as f64 * 0.02;
            let (v, _) = integrate_to_infinity(|t| (-t.powf(p)).exp(), x, 1e-15, 1e-12);
            v * (x.powf(p) / 2.0).exp()
        })
        .fold(0.0, f64::max);
    let recipe = 2f64.powi(d as i32 + 1).max((2.0 * c_quad).powf(p));
    let mut needed: f64 = 0.0;
    for ia in 0..=24 {
        let a = 1e-3 * 10f64.powf(ia as f64 / 6.0);
        for ib in 0..=24 {
            let b = 1e-3 * 10f64.powf(ib as f64 / 6.0);
            if (2.0 * a / b).powf(1.0 / eps) > SUM_LEMMA_MAX_PEAK {
                continue;
            }
            let log_direct = direct_sum_log(a, b, 2, d, eps);
            let x = a.powf(p / eps) * b.powf(-(d as f64) / eps);
            let f = |bb: f64| bb * x + neg((b / bb).ln());
            if f(recipe) >= log_direct {
                continue;
            }
            let mut hi = recipe;
            while f(hi) < log_direct {
                hi *= 2.0;
            }
            needed = needed.max(bisect_last_true(|bb| f(bb) < log_direct, recipe, hi, 1e-9 * hi));
        }
    }
    let b = recipe.max(1.25 * needed);
    cache.lock().unwrap().insert((d, eps.to_bits()), b);
    b
}

/// Largest `(2a/b)^{1/ε}` covered by the calibration of `B`.
pub const SUM_LEMMA_MAX_PEAK: f64 = 2.0e4;

/// Upper estimate of `log Σ_{ℓ>ℓ0} e^{-bℓ^{d+ε} + aℓ^d}`: explicit terms past
/// `ℓ* = (2a/b)^{1/ε}` until they are negligible, then the remainder bounded by
/// `∫_ℓ^∞ e^{-b t^{d+ε}/2} dt`, valid because `aℓ^d <= bℓ^{d+ε}/2` there.
fn direct_sum_log(a: f64, b: f64, ell0: u64, d: usize, eps: f64) -> f64 {
    let df = d as f64;
    let p = df + eps;
    let star = (2.0 * a / b).powf(1.0 / eps);
    let mut acc = f64::NEG_INFINITY;
    let mut l = ell0 + 1;
    loop {
        let lf = l as f64;
        let t = -b * lf.powf(p) + a * lf.powf(df);
        acc = log_sum_exp(&[acc, t]);
        if lf >= star && t < acc - 40.0 {
            break;
        }
        l += 1;
    }
    let s = l as f64;
    let k = b / 2.0;
    let tail = -k * s.powf(p) - (k * p * s.powf(p - 1.0)).ln();
    log_sum_exp(&[acc, tail])
}

/// The sum bound and the directly summed value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SumLemma {
    pub b_constant: f64,
    pub log_bound: f64,
    pub log_direct: f64,
}

impl SumLemma {
    pub fn holds(&self) -> bool {
        self.log_direct <= self.log_bound
    }
}

pub fn sum_lemma(a: f64, b: f64, ell0: u64, d: usize, eps: f64) -> Result<SumLemma> {
    if !(a > 0.0 && b > 0.0) || ell0 < 2 || !(eps > 0.0) {
        return arg("sum_lemma needs a, b, eps > 0 and ell0 >= 2");
    }
    if (2.0 * a / b).powf(1.0 / eps) > SUM_LEMMA_MAX_PEAK {
        return Err(Error::Resource(format!(
            "peak of the summand beyond the calibrated range {SUM_LEMMA_MAX_PEAK}"
        )));
    }
    let bc = sum_lemma_constant(d, eps);
    let p = d as f64 + eps;
    let log_bound = bc * a.powf(p / eps) * b.powf(-(d as f64) / eps) + neg((b / bc).ln());
    Ok(SumLemma { b_constant: bc, log_bound, log_direct: direct_sum_log(a, b, ell0, d, eps) })
}

/// Zero-temperature bounds on `n_Q` and `h_Q` for a cube of physical side `side`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZeroTemperatureBounds {
    pub n_bound: f64,
    pub h_bound: f64,
    pub l_mu: u64,
}

/// Smallest integer `L >= 1` with `ψ(L/2) >= 64 μ_+²/A²`.
pub fn l_mu(mu: f64, config: &RuelleConfig) -> u64 {
    let target = 64.0 * pos(mu).powi(2) / config.a().powi(2);
    let mut l = 1u64;
    while config.psi.value(l as f64 / 2.0) < target {
        l = if l < 1 << 20 { l + 1 } else { l * 2 };
    }
    l
}

pub fn t0_bounds(side: f64, mu: f64, config: &RuelleConfig) -> Result<ZeroTemperatureBounds> {
    // ζ is a unit-coordinate length here.
    if side / config.scale < config.zeta {
        return arg(format!("cube side {side} below zeta = {} (unit coordinates)", config.zeta));
    }
    let d = config.d as i32;
    let df = d as f64;
    let a = config.a();
    let l = side / config.scale;
    let lm = l_mu(mu, config);
    let lead = pos(2.0 * config.kappa + a + mu);
    let psi_half = config.psi.value(l / 2.0);
    let ratio = lm as f64 / l;
    let n_bound = 4.0 * lead / a
        * (1.0 + 2f64.powi(d - 2) * config.alpha.powf(-0.5) * psi_half.sqrt() + ratio.powf(df / 2.0))
        * l.powf(df);
    let h_bound = 12.0 * lead * lead / a
        * (1.0 + 2f64.powi(2 * d - 1) / config.alpha * psi_half + ratio.powf(df))
        * l.powf(df);
    Ok(ZeroTemperatureBounds { n_bound, h_bound, l_mu: lm })
}

/// External-potential data on a cube: `v >= -μ0`, `min_Q v`, and `∫_Q e^{-βv}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PotentialDescriptor {
    pub mu0: f64,
    pub min_v: f64,
    pub boltzmann_integral: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PotentialBounds {
    /// `ℛ0 = L^{d+ε} + (e^{βμ0}/β)^{1+d/ε} + (1 + (log β)_-)/β`
    pub r0: Option<f64>,
    pub log_exp_bound: Option<f64>,
    pub n2_bound: Option<f64>,
    /// Zero-temperature count bound.
    pub n_bound_t0: Option<f64>,
}

/// Local bounds in an external potential on a cube of physical side `side`;
/// `eps` is the exponent of `ψ(ℓ) = ℓ^ε`.
pub fn potential_bounds(side: f64, v: &PotentialDescriptor, t: f64, config: &RuelleConfig, eps: f64) -> Result<PotentialBounds> {
    let zeta = config.zeta;
    let unit_side = if t > 0.0 { side } else { side / config.scale };
    if unit_side < zeta {
        return arg(format!("cube side {side} below zeta = {zeta}"));
    }
    let df = config.d as f64;
    if t > 0.0 {
        let integral = v
            .boltzmann_integral
            .ok_or_else(|| Error::Argument("T > 0 needs the Boltzmann integral of v over Q".into()))?;
        let beta = 1.0 / t;
        let r0 = side.powf(df + eps) + ((beta * v.mu0).exp() / beta).powf(1.0 + df / eps) + (1.0 + neg(beta.ln())) / beta;
        let log_exp_bound = (zeta * beta).exp() * integral + zeta * beta * r0;
        let ld = side.powf(df);
        let first = (zeta * beta * (r0 + 1.0)).exp() * (1.0 + ld * (beta * (zeta + v.mu0)).exp()) * integral;
        let second = zeta / beta * (zeta * beta).exp() * integral + zeta * r0;
        Ok(PotentialBounds {
            r0: Some(r0),
            log_exp_bound: Some(log_exp_bound),
            n2_bound: Some(ld * first.min(second)),
            n_bound_t0: None,
        })
    } else {
        let d = config.d as i32;
        let a = config.a();
        let l = side / config.scale;
        let ld = l.powf(df);
        let lm = l_mu(v.mu0, config) as f64;
        let core = 2.0 * config.kappa + a - v.min_v;
        let root = (16.0 * ld * pos(v.mu0).powi(2) * lm.powf(df) / (a * a)
            + 2f64.powi(2 * d - 2) / config.alpha * config.psi.value(l / 2.0) * l.powf(2.0 * df)
            - 4.0 * ld / a * neg(core))
        .max(0.0)
        .sqrt();
        Ok(PotentialBounds { r0: None, log_exp_bound: None, n2_bound: None, n_bound_t0: Some(4.0 * ld / a * pos(core) + root) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potentials::{repulsive_split, repulsive_split_with, PairPotential};
    use proptest::prelude::*;

    fn soft_core_config() -> RuelleConfig {
        let split = repulsive_split(&PairPotential::soft_core(0.2, 6.0)).unwrap();
        feasible_constants(&split, &TailFunction::zero(), &ScaleFunction::Power { exponent: 0.9 }, 1).unwrap()
    }

    fn weak_lj_config() -> RuelleConfig {
        let w = PairPotential::lennard_jones(1.0, 0.01);
        let split = repulsive_split_with(&w, SplitRule::Indicator).unwrap();
        let grid = crate::potentials::log_grid(split.delta, 1e3, 4000);
        let phi = TailFunction::fit_amplitude(&split.stable_part(), 2.0, &grid);
        feasible_constants(&split, &phi, &ScaleFunction::Power { exponent: 0.5 }, 1).unwrap()
    }

    #[test]
    fn psi_examples() {
        let phi = TailFunction::new(1.0, 3.0);
        assert!(validate_psi(&ScaleFunction::Power { exponent: 0.5 }, &phi, 1, 10_000).pass);
        let bad = validate_psi(&ScaleFunction::Power { exponent: 2.0 }, &phi, 1, 10_000);
        assert!(!bad.pass);
        assert_eq!(bad.ratio_witness, Some(1));
        assert!(validate_psi(&ScaleFunction::Log, &phi, 1, 10_000).pass);
    }

    #[test]
    fn scale_sequence_example() {
        assert_eq!(scale_sequence(10, 0.1, 3).unwrap(), vec![10, 12, 14, 17]);
        assert!(matches!(scale_sequence(2, 0.01, 3), Err(Error::Infeasible(_))));
    }

    #[test]
    fn doubling_ell0_keeps_band() {
        for &(l0, al) in &[(10u64, 0.1), (25, 0.05), (40, 0.2), (100, 0.02)] {
            if scale_sequence(l0, al, 10).is_ok() {
                assert!(scale_sequence(2 * l0, al, 10).is_ok(), "l0 = {l0}, alpha = {al}");
            }
        }
    }

    #[test]
    fn zero_tail_config_is_set_by_core_condition() {
        let c = soft_core_config();
        assert_eq!(c.lattice_sum, 0.0);
        assert_eq!(c.tail_series, 0.0);
        assert_eq!(c.alpha, ALPHA_CAP);
        // psi(l0) >= 16 with psi = l^0.9 and kappa = 0
        assert_eq!(c.ell0, 22);
        assert!(c.check_conditions().holds(1e-12, 1.0));
        assert!((c.zeta - 32.0).abs() < 1e-12);
    }

    #[test]
    fn attractive_config_satisfies_conditions_by_substitution() {
        let c = weak_lj_config();
        assert!(c.lattice_sum > 0.0 && c.tail_series > 0.0);
        let chk = c.check_conditions();
        assert!(chk.holds(0.0, 1.0), "{chk:?}");
        assert!(scale_sequence(c.ell0, c.alpha, BAND_STEPS).is_ok());
        // smallest l0: the predecessor breaks a condition or the band
        let mut prev = c.clone();
        prev.ell0 -= 1;
        prev.tail_series = {
            let t = tail_series_i(&c.phi, &c.psi, prev.ell0, 1).unwrap();
            t.value + t.remainder
        };
        assert!(!prev.check_conditions().holds(0.0, 1.0) || scale_sequence(prev.ell0, c.alpha, BAND_STEPS).is_err());
    }

    #[test]
    fn stronger_core_loosens_alpha() {
        let w = PairPotential::lennard_jones(1.0, 0.5);
        let split = repulsive_split_with(&w, SplitRule::Indicator).unwrap();
        let phi = TailFunction::new(0.3, 2.0);
        let psi = ScaleFunction::Power { exponent: 0.5 };
        let weak = feasible_constants_with_kappa(&split, &phi, &psi, 1, 0.1).unwrap();
        let mut strong_split = split.clone();
        strong_split.a *= 2.0;
        let strong = feasible_constants_with_kappa(&strong_split, &phi, &psi, 1, 0.1).unwrap();
        assert!(weak.alpha < ALPHA_CAP);
        assert!(strong.alpha > weak.alpha);
    }

    #[test]
    fn q_index_examples() {
        let c = soft_core_config();
        assert_eq!(q_index(&Configuration::empty(1), &c), 0);
        let far = Configuration::free_points(1, vec![1e3]);
        assert_eq!(q_index(&far, &c), 0);
        // m points in one cell of Q_1 \ Q_0 with V1 psi1 < m² <= V2 psi2
        let (v1, v2) = (c.volume(1) * c.psi_j(1), c.volume(2) * c.psi_j(2));
        let m = v1.sqrt().floor() as usize + 1;
        assert!((m * m) as f64 > v1 && (m * m) as f64 <= v2);
        let cell = c.ell0 as f64 + 1.0;
        let pts: Vec<f64> = (0..m).map(|i| c.scale * (cell + (i as f64 + 0.5) / m as f64)).collect();
        let y = Configuration::free_points(1, pts);
        assert_eq!(q_index(&y, &c), 1);
    }

    #[test]
    fn q_index_definition_holds_past_q() {
        let c = soft_core_config();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..300 {
            let (_, y) = random_draw(&c, &mut rng);
            let q = q_index(&y, &c);
            let sq = square_counts(&y, &c, q + 20);
            for j in (q + 1)..=(q + 20) {
                assert!(sq[j] <= c.volume(j) * c.psi_j(j));
            }
            if q > 0 {
                assert!(sq[q] > c.volume(q) * c.psi_j(q));
            }
        }
    }

    #[test]
    fn empty_draw_margin_is_the_q0_constant() {
        let c = soft_core_config();
        let e = Configuration::empty(1);
        let b = pointwise_lower_bound(&e, &e, &c);
        let expect = 4f64.powi(-1) * c.a() / c.alpha * c.psi_j(0) * c.volume(0);
        assert_eq!(b.q, 0);
        assert!((b.margin - expect).abs() < 1e-12 * expect);
    }

    #[test]
    fn single_far_point_margin_nonnegative() {
        let c = weak_lj_config();
        let x = Configuration::free_points(1, vec![0.0]);
        let y = Configuration::free_points(1, vec![10.0 * c.q0_side()]);
        let b = pointwise_lower_bound(&x, &y, &c);
        assert_eq!(b.q, 0);
        assert!(b.margin >= 0.0);
    }

    #[test]
    fn pointwise_margin_on_random_draws() {
        for c in [soft_core_config(), weak_lj_config()] {
            let scan = scan_pointwise_margin(&c, 4000, 11);
            assert!(scan.min_margin >= -1e-9, "{scan:?}");
            assert!(scan.q_positive_draws > 100);
        }
    }

    #[test]
    fn annulus_band_and_psi_propagation() {
        for c in [soft_core_config(), weak_lj_config()] {
            assert!(c.psi_propagation(10) <= 1.0 + 1e-12);
            for (j, frac, lo, hi) in c.annulus_band(10) {
                assert!(lo && hi, "j = {j}, |A_j|/V_j = {frac}");
            }
        }
    }

    #[test]
    fn xi_examples() {
        let p = XiParams { c_t: 1.0, c_0: 1.0, eps: 0.5 };
        assert!((xi(1.0, 0.0, 1, &p) - 2.0).abs() < 1e-15);
        assert_eq!(xi(0.0, -1.5, 1, &p), 0.0);
        assert!(xi(1.0, -200.0, 1, &p) < 1e-40);
    }

    #[test]
    fn moment_bound_precondition_and_small_activity() {
        assert!(moment_bound(1.0, 1.0, 0.0, 2.0, 1, 0.5, None).is_err());
        let b = moment_bound(4.0, 1.0, -200.0, 2.0, 1, 0.5, None).unwrap();
        // z-proportional branch vanishes with z
        assert!(b.n2_polynomial < 1e-20);
    }

    proptest! {
        #[test]
        fn remainder_monotone(z in 1e-3f64..5.0, l in 1.0f64..20.0, beta in 0.2f64..3.0) {
            let r = remainder_r(z, beta, 2.0, l, 1, 0.5);
            prop_assert!(remainder_r(z * 1.01, beta, 2.0, l, 1, 0.5) > r);
            prop_assert!(remainder_r(z, beta, 2.0, l * 1.01, 1, 0.5) > r);
        }

        #[test]
        fn sum_lemma_monotone(a in 0.01f64..2.0, b in 0.05f64..2.0) {
            let base = sum_lemma(a, b, 2, 1, 0.5).unwrap();
            prop_assert!(base.holds());
            prop_assert!(sum_lemma(a * 1.1, b, 2, 1, 0.5).unwrap().log_bound > base.log_bound);
            prop_assert!(sum_lemma(a, b * 1.1, 2, 1, 0.5).unwrap().log_bound <= base.log_bound);
        }
    }

    #[test]
    fn sum_lemma_examples() {
        let tiny = sum_lemma(1e-9, 1.0, 2, 1, 0.5).unwrap();
        assert!(tiny.holds());
        assert!((tiny.log_direct + 3f64.powf(1.5)).abs() < 0.5);
        let unit = sum_lemma(1.0, 1.0, 2, 1, 0.5).unwrap();
        assert!(unit.holds());
    }

    #[test]
    fn t0_examples() {
        let c = soft_core_config();
        let side = c.zeta * c.scale;
        let b = t0_bounds(side, -(2.0 * c.kappa + c.a()), &c).unwrap();
        assert_eq!(b.n_bound, 0.0);
        assert_eq!(t0_bounds(side, 0.0, &c).unwrap().l_mu, 1);
        assert!(t0_bounds(side * 0.5, 0.0, &c).is_err());
    }

    #[test]
    fn constant_potential_recovers_plain_forms() {
        let c = soft_core_config();
        let (t, mu) = (1.0, 0.3);
        let side = c.zeta;
        let v = PotentialDescriptor { mu0: mu, min_v: -mu, boltzmann_integral: Some(side * mu.exp()) };
        let b = potential_bounds(side, &v, t, &c, 0.5).unwrap();
        let r0 = side.powf(1.5) + mu.exp().powf(3.0) + 1.0;
        assert!((b.r0.unwrap() - r0).abs() < 1e-9 * r0);
        let far = PotentialDescriptor { mu0: 0.0, min_v: 1e6, boltzmann_integral: None };
        let b0 = potential_bounds(side, &far, 0.0, &c, 0.5).unwrap();
        assert!(b0.n_bound_t0.unwrap() < 1e-9 * side.powi(2) + b0.n_bound_t0.unwrap().min(1e300));
    }

    #[test]
    fn exp_bound_is_at_least_one_and_continuous_in_beta() {
        let c = soft_core_config();
        let vals: Vec<f64> = [2.0, 1.0, 0.5]
            .iter()
            .map(|t| exp_moment_bound(c.zeta, *t, 0.0, &c).unwrap().log_cube)
            .collect();
        assert!(vals.iter().all(|v| v.is_finite() && *v >= 0.0));
        let b = exp_moment_bound(c.zeta, 1.0, 0.0, &c).unwrap();
        assert!(b.log_subsequence <= b.log_full + 1e-9);
        assert!(b.log_simplified > 0.0);
    }
}
