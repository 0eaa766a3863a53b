//! The basic approximation lemma: from a step function `f`, a tolerance
//! `ε`, a starting frequency `N0` and a modulus `ω`, build a set `E` and a
//! banded Hermitian polynomial `P` with
//!
//! 1. `|E| > 2π - ε`,
//! 2. `∫_E |P - f| < ε`,
//! 3. `Σ |C_k|² ω(|C_k|) < ε`,
//! 4. `∫_e |S_m| < ε + ∫_e |f|` for every partial sum `S_m` and `e ⊂ E`.
//!
//! Each nonzero piece `γ·χ_Δ` of `f` is carried into its own frequency
//! band by the modulated spike `γ·g(νx)·χ_Δ`, where `g` is `1` off a short
//! interval and `1 - 2/ε` on it, so `g` has mean zero and the low
//! frequencies of the block vanish. The band is the Fourier truncation of
//! that block, and `E` is where the spikes are absent.

use std::f64::consts::PI;
use std::fmt;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::{
    integrate_abs_diff, integrate_abs_excess, sample_subsets, AbsPrefix, Grid, Interval,
    IntervalSet, PiecewiseConstant, TWO_PI,
};
use crate::step::{StepFunction, MAX_LEVEL};
use crate::trig::{
    coefficient_budget, eval_partial_sum, CoeffBlock, Modulus, PartialSumSweep,
};

/// `g(x)` of the spike profile, periodically extended.
pub fn spike_eval(epsilon: f64, x: f64) -> f64 {
    let t = x.rem_euclid(TWO_PI);
    if t >= epsilon * PI / 2.0 && t < 1.5 * epsilon * PI {
        1.0 - 2.0 / epsilon
    } else {
        1.0
    }
}

/// Largest power of two not exceeding `epsilon / 4`.
///
/// The spikes of one piece remove `ε/2` of its length, so running the
/// construction at a quarter of the caller's tolerance keeps `|E^c| < ε`
/// with room to spare. A power of two keeps the spike edges exact.
pub fn internal_epsilon(epsilon: f64) -> f64 {
    let target = epsilon / 4.0;
    let mut e = 1.0;
    while e > target {
        e /= 2.0;
    }
    e
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaParams {
    pub epsilon: f64,
    pub n0: u64,
    pub omega: Modulus,
    pub internal_epsilon: f64,
    pub eta: f64,
    pub delta: f64,
}

impl LemmaParams {
    /// Parameters for `f`, enforcing `0 < ε < 1/2` and `N0 > 2`.
    pub fn new(f: &StepFunction, epsilon: f64, n0: u64, omega: Modulus) -> Result<Self> {
        if n0 <= 2 {
            return Err(Error::input(format!("N0 must exceed 2, got {n0}")));
        }
        Self::with_start(f, epsilon, n0, omega)
    }

    /// As [`LemmaParams::new`] but allowing any starting frequency `N0 ≥ 1`.
    pub fn with_start(f: &StepFunction, epsilon: f64, n0: u64, omega: Modulus) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < 0.5) {
            return Err(Error::input(format!("epsilon must lie in (0, 1/2), got {epsilon}")));
        }
        if n0 == 0 {
            return Err(Error::input("N0 must be positive"));
        }
        omega.validate()?;
        let eps_int = internal_epsilon(epsilon);
        let energy = f.integral_of_square();
        let eta = if energy == 0.0 {
            eps_int * eps_int / 4.0
        } else {
            0.99 * eps_int * eps_int / 4.0 / energy
        };
        let delta = modulus_threshold(&omega, eta, eps_int)?;
        Ok(LemmaParams {
            epsilon,
            n0,
            omega,
            internal_epsilon: eps_int,
            eta,
            delta,
        })
    }
}

/// A `δ < cap` with `ω(δ) < η`, as large as bisection finds.
pub fn modulus_threshold(omega: &Modulus, eta: f64, cap: f64) -> Result<f64> {
    if omega.eval(cap) < eta {
        return Ok(cap * (1.0 - 1e-12));
    }
    let (mut lo, mut hi) = (0.0f64, cap);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if omega.eval(mid) < eta {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if lo > 0.0 {
        Ok(lo)
    } else {
        Err(Error::input("modulus does not fall below η near zero"))
    }
}

/// Smallest level at which every piece satisfies
/// `(4/ε)|γ|·sqrt(|Δ|) < min(ε/2, δ)`.
pub fn required_level(f: &StepFunction, epsilon: f64, delta: f64) -> u32 {
    let gamma = f.sup_norm();
    if gamma == 0.0 {
        return f.level();
    }
    let bound = (epsilon / 2.0).min(delta);
    let mut m = f.level();
    while 4.0 / epsilon * gamma * (TWO_PI / 2f64.powi(m as i32)).sqrt() >= bound {
        m += 1;
    }
    m
}

/// `f` re-expressed at [`required_level`]. Errors when that level is
/// deeper than step functions may go.
pub fn refine_partition(f: &StepFunction, epsilon: f64, delta: f64) -> Result<StepFunction> {
    let m = required_level(f, epsilon, delta);
    if m > MAX_LEVEL {
        return Err(Error::input(format!(
            "refinement needs level {m}, beyond the supported {MAX_LEVEL}"
        )));
    }
    f.refine_to(m)
}

/// One piece `γ·g(νx)·χ_Δ` of the construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModulatedBlock {
    pub s: usize,
    pub gamma: f64,
    pub delta_s: Interval,
    pub nu: u64,
    pub band: (u64, u64),
    /// `max_{|k| < N_prev} |C_k|` of the full block.
    pub low_band_max: f64,
    /// `∫ |band reconstruction - g_s|` over the circle.
    pub truncation_error: f64,
}

/// Spike intervals of `g(νx)` clipped to `Δ`.
fn spikes(delta: Interval, nu: u64, eps: f64) -> Vec<Interval> {
    let (a, b) = (eps * PI / 2.0, 1.5 * eps * PI);
    let nuf = nu as f64;
    let j_first = ((delta.lo * nuf - b) / TWO_PI).floor() as i64;
    let j_last = ((delta.hi * nuf - a) / TWO_PI).ceil() as i64;
    let mut out = Vec::new();
    for j in j_first..=j_last {
        let base = TWO_PI * j as f64;
        let lo = ((a + base) / nuf).max(delta.lo);
        let hi = ((b + base) / nuf).min(delta.hi);
        if hi > lo {
            out.push(Interval { lo, hi });
        }
    }
    out
}

/// `(1/2π) ∫ γ g(νx) χ_Δ(x) e^{-ikx} dx`, in closed form.
///
/// Spikes lying wholly inside `Δ` form a geometric progression in `k`; the
/// at most two clipped ones at the ends are integrated directly.
pub fn block_coefficient(gamma: f64, delta: Interval, nu: u64, eps: f64, k: i64) -> Complex64 {
    if gamma == 0.0 {
        return Complex64::default();
    }
    let (a, b) = (eps * PI / 2.0, 1.5 * eps * PI);
    let nuf = nu as f64;
    let mut spike_part = Complex64::default();
    // Fully contained spikes: j_a ..= j_b.
    let j_a = ((delta.lo * nuf - a) / TWO_PI).ceil() as i64;
    let j_b = ((delta.hi * nuf - b) / TWO_PI).floor() as i64;
    let full = |j: i64| {
        let base = TWO_PI * j as f64;
        (a + base) / nuf >= delta.lo && (b + base) / nuf <= delta.hi
    };
    let (j_a, j_b) = {
        let mut ja = j_a;
        while !full(ja) && ja <= j_b {
            ja += 1;
        }
        let mut jb = j_b;
        while jb >= ja && !full(jb) {
            jb -= 1;
        }
        (ja, jb)
    };
    if j_b >= j_a {
        let count = (j_b - j_a + 1) as i128;
        let unit = crate::measure::exp_integral(k, a / nuf, b / nuf);
        let nu_i = nu as i128;
        let phase = |j: i128| {
            let r = (i128::from(k) * j).rem_euclid(nu_i);
            Complex64::from_polar(1.0, -TWO_PI * r as f64 / nuf)
        };
        let geom = if i128::from(k).rem_euclid(nu_i) == 0 {
            Complex64::new(count as f64, 0.0)
        } else {
            let r1 = phase(1);
            (phase(j_a as i128) - phase(j_a as i128 + count)) / (Complex64::new(1.0, 0.0) - r1)
        };
        spike_part += unit * geom;
    }
    for sp in spikes(delta, nu, eps) {
        let j = ((sp.lo * nuf - a) / TWO_PI).round() as i64;
        let inside = j >= j_a && j <= j_b && full(j);
        if !inside {
            spike_part += crate::measure::exp_integral(k, sp.lo, sp.hi);
        }
    }
    let whole = crate::measure::exp_integral(k, delta.lo, delta.hi);
    (whole - spike_part * (2.0 / eps)) * (gamma / TWO_PI)
}

/// The block `γ·g(νx)·χ_Δ` as an exact piecewise-constant function.
pub fn block_piecewise(gamma: f64, delta: Interval, nu: u64, eps: f64) -> PiecewiseConstant {
    let mut breaks = vec![0.0];
    let mut values = Vec::new();
    let push = |x: f64, v: f64, breaks: &mut Vec<f64>, values: &mut Vec<f64>| {
        // Region [last break, x) takes value v.
        let last = *breaks.last().unwrap();
        if x > last {
            values.push(v);
            breaks.push(x);
        }
    };
    push(delta.lo, 0.0, &mut breaks, &mut values);
    let plateau = gamma;
    let dip = gamma * (1.0 - 2.0 / eps);
    for sp in spikes(delta, nu, eps) {
        push(sp.lo, plateau, &mut breaks, &mut values);
        push(sp.hi, dip, &mut breaks, &mut values);
    }
    push(delta.hi, plateau, &mut breaks, &mut values);
    push(TWO_PI, 0.0, &mut breaks, &mut values);
    if values.is_empty() {
        return PiecewiseConstant::constant(0.0);
    }
    *breaks.last_mut().unwrap() = TWO_PI;
    PiecewiseConstant::new(breaks, values).expect("block breakpoints are ordered")
}

/// `E_s = {x ∈ Δ: g_s(x) = γ}`; all of `Δ` when `γ = 0`.
pub fn level_set_e(gamma: f64, delta: Interval, nu: u64, eps: f64) -> IntervalSet {
    let d = IntervalSet::from_intervals([delta]);
    if gamma == 0.0 {
        return d;
    }
    IntervalSet::from_intervals(spikes(delta, nu, eps)).complement_within(&d)
}

/// `max_{0 ≤ k < n_prev} |C_k|` of a block.
fn low_band_max(gamma: f64, delta: Interval, nu: u64, eps: f64, n_prev: u64) -> f64 {
    (0..n_prev as i64)
        .map(|k| block_coefficient(gamma, delta, nu, eps, k).norm())
        .fold(0.0, f64::max)
}

/// Smallest admissible modulation `ν ≥ nu_min`, a multiple of `base`, with
/// every coefficient below `n_prev` under `ε/(16·sqrt(n_prev))`.
///
/// Doubling finds an admissible multiple, then bisection walks down to the
/// smallest admissible one it can certify. `cap` bounds the search.
#[allow(clippy::too_many_arguments)]
pub fn choose_modulation(
    gamma: f64,
    delta: Interval,
    n_prev: u64,
    eps: f64,
    nu_min: u64,
    base: u64,
    cap: u64,
) -> Result<(u64, f64)> {
    let threshold = eps / (16.0 * (n_prev as f64).sqrt());
    let first = nu_min.max(1).div_ceil(base) * base;
    if gamma == 0.0 {
        return Ok((first, 0.0));
    }
    let ok = |nu: u64| {
        let m = low_band_max(gamma, delta, nu, eps, n_prev);
        (m < threshold, m)
    };
    let first_mult = first / base;
    let mut mult = first_mult;
    let mut best_m = loop {
        let nu = mult * base;
        if nu > cap {
            return Err(Error::invariant(format!(
                "no modulation up to {cap} keeps the band below {n_prev} under {threshold:.3e}"
            )));
        }
        let (good, m) = ok(nu);
        if good {
            break m;
        }
        mult *= 2;
    };
    if mult == first_mult {
        return Ok((mult * base, best_m));
    }
    // `lo` was tested and failed, `hi` is admissible.
    let (mut lo, mut hi) = (mult / 2, mult);
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        let (good, m) = ok(mid * base);
        if good {
            hi = mid;
            best_m = m;
        } else {
            lo = mid;
        }
    }
    Ok((hi * base, best_m))
}

/// Band coefficients `C_k` for `lo ≤ k < hi`.
fn band_coefficients(gamma: f64, delta: Interval, nu: u64, eps: f64, lo: u64, hi: u64) -> Vec<Complex64> {
    (lo..hi)
        .map(|k| block_coefficient(gamma, delta, nu, eps, k as i64))
        .collect()
}

/// Smallest `N_s > n_prev` (as found by doubling then bisection on the band
/// width) whose band reconstruction is within `budget` of the block in L¹.
#[allow(clippy::too_many_arguments)]
pub fn choose_truncation(
    s: usize,
    gamma: f64,
    delta: Interval,
    nu: u64,
    eps: f64,
    n_prev: u64,
    budget: f64,
    grid: &Grid,
) -> Result<(u64, CoeffBlock, f64)> {
    if gamma == 0.0 {
        return Ok((n_prev + 1, CoeffBlock::zeros(s, n_prev, n_prev + 1)?, 0.0));
    }
    let cap = grid.max_resolved_freq();
    let target = block_piecewise(gamma, delta, nu, eps);
    let full = IntervalSet::full();
    let error_for = |hi: u64| -> Result<(f64, CoeffBlock)> {
        let block = CoeffBlock::new(s, n_prev, band_coefficients(gamma, delta, nu, eps, n_prev, hi))?;
        let values = eval_partial_sum(std::slice::from_ref(&block), u64::MAX, grid)?;
        let err = integrate_abs_diff(&values, grid, &target, &full)?;
        Ok((err, block))
    };
    let mut width = 1u64;
    let max_width = cap.saturating_sub(n_prev);
    let mut last_fail = 0u64;
    let mut best;
    loop {
        let w = width.min(max_width);
        if w == 0 {
            return Err(Error::invariant(format!(
                "band from {n_prev} starts beyond the grid's {cap} resolved frequencies"
            )));
        }
        let (err, block) = error_for(n_prev + w)?;
        if err < budget {
            best = (n_prev + w, block, err);
            width = w;
            break;
        }
        if w == max_width {
            return Err(Error::invariant(format!(
                "band from {n_prev} needs more than the grid's {cap} resolved frequencies \
                 (L¹ error {err:.3e} at the cap, budget {budget:.3e})"
            )));
        }
        last_fail = w;
        width *= 2;
    }
    let (mut lo_w, mut hi_w) = (last_fail, width);
    if width > 1 {
        while hi_w - lo_w > 1 {
            let mid = lo_w + (hi_w - lo_w) / 2;
            let (err, block) = error_for(n_prev + mid)?;
            if err < budget {
                hi_w = mid;
                best = (n_prev + mid, block, err);
            } else {
                lo_w = mid;
            }
        }
    }
    Ok(best)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LemmaCondition {
    /// `|E| > 2π - ε`.
    Measure,
    /// `∫_E |P - f| < ε`.
    Approximation,
    /// `Σ |C_k|² ω(|C_k|) < ε`.
    Budget,
    /// Partial sums on subsets of `E`.
    PartialSums,
    /// `|C_k| < δ` for every coefficient.
    CoefficientBound,
    /// A modulation or truncation could not be found within the grid.
    Resolution,
}

impl LemmaCondition {
    fn refinable(self) -> bool {
        matches!(
            self,
            LemmaCondition::Budget | LemmaCondition::PartialSums | LemmaCondition::CoefficientBound
        )
    }
}

impl fmt::Display for LemmaCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LemmaCondition::Measure => "measure: |E| > 2π - ε",
            LemmaCondition::Approximation => "approximation: ∫_E|P - f| < ε",
            LemmaCondition::Budget => "budget: Σ|C_k|²ω(|C_k|) < ε",
            LemmaCondition::PartialSums => "partial sums on subsets of E",
            LemmaCondition::CoefficientBound => "coefficient bound |C_k| < δ",
            LemmaCondition::Resolution => "grid resolution",
        };
        f.write_str(s)
    }
}

/// Measured values and margins of the four conditions. A margin is the
/// amount by which the inequality holds; positive means satisfied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub level: u32,
    pub measure_e: f64,
    pub margin_measure: f64,
    pub l1_on_e: f64,
    pub margin_approximation: f64,
    pub budget: f64,
    pub margin_budget: f64,
    /// `η · Σ|C_k|²`, the bound the proof uses for the budget.
    pub budget_chain: f64,
    pub margin_partial_sums: f64,
    /// Worst `∫_E (|S_m| - |f|)_+` over the checked `m`.
    pub partial_sum_excess: f64,
    pub max_coeff: f64,
    pub delta: f64,
    pub m_checked: usize,
    pub subsets_checked: usize,
}

impl LemmaReport {
    pub fn failed(&self) -> Option<LemmaCondition> {
        if !(self.margin_measure > 0.0) {
            Some(LemmaCondition::Measure)
        } else if !(self.margin_approximation > 0.0) {
            Some(LemmaCondition::Approximation)
        } else if !(self.max_coeff < self.delta) {
            Some(LemmaCondition::CoefficientBound)
        } else if !(self.margin_budget > 0.0) {
            Some(LemmaCondition::Budget)
        } else if !(self.margin_partial_sums > 0.0) {
            Some(LemmaCondition::PartialSums)
        } else {
            None
        }
    }

    pub fn all_positive(&self) -> bool {
        self.failed().is_none()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaOutput {
    pub params: LemmaParams,
    /// `f` at the level the construction ran on.
    pub refined: StepFunction,
    #[serde(rename = "E")]
    pub e_set: IntervalSet,
    pub blocks: Vec<ModulatedBlock>,
    #[serde(with = "crate::trig::bands_format")]
    pub spectrum: Vec<CoeffBlock>,
    #[serde(rename = "margins")]
    pub report: LemmaReport,
}

impl LemmaOutput {
    /// One past the last frequency of `P` (`N0 + 1` when `P` is empty).
    pub fn end(&self) -> u64 {
        self.spectrum
            .last()
            .map_or(self.params.n0 + 1, |b| b.hi())
    }
}

#[derive(Debug)]
pub struct LemmaFailure {
    pub condition: LemmaCondition,
    pub detail: String,
    pub report: Option<LemmaReport>,
}

impl fmt::Display for LemmaFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "lemma construction failed on {}: {}", self.condition, self.detail)
    }
}

impl std::error::Error for LemmaFailure {}

/// Which partial sums the partial-sum condition inspects.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MSweep {
    /// Band ends plus 8 evenly spaced interior points per band.
    BandPoints,
    /// Every `m` from `N0` to the end of `P`.
    Exhaustive,
}

/// Knobs of the partial-sum check.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cond4Options {
    pub subsets: usize,
    pub max_pieces: usize,
    pub seed: u64,
    pub sweep: MSweep,
}

impl Default for Cond4Options {
    fn default() -> Self {
        Cond4Options {
            subsets: 100,
            max_pieces: 8,
            seed: 0,
            sweep: MSweep::BandPoints,
        }
    }
}

/// `m` values for the partial-sum sweep, ascending and deduplicated.
pub fn partial_sum_points(spectrum: &[CoeffBlock], sweep: MSweep) -> Vec<u64> {
    let mut ms = Vec::new();
    for b in spectrum {
        match sweep {
            MSweep::Exhaustive => ms.extend(b.lo()..b.hi()),
            MSweep::BandPoints => {
                ms.push(b.lo());
                ms.push(b.hi() - 1);
                let w = b.hi() - b.lo();
                for i in 1..=8u64 {
                    ms.push(b.lo() + i * w / 9);
                }
            }
        }
    }
    ms.retain(|&m| spectrum.iter().any(|b| m >= b.lo() && m < b.hi()));
    ms.sort_unstable();
    ms.dedup();
    ms
}

/// Result of [`verify_condition_4`].
#[derive(Clone, Debug, PartialEq)]
pub struct Cond4Report {
    /// Worst `ε + ∫_e|f| - ∫_e|S_m|` over sampled `e` and checked `m`.
    pub sampled_margin: f64,
    /// Worst `ε - ∫_E (|S_m| - |f|)_+`, the margin against the worst `e ⊂ E`.
    pub adversarial_margin: f64,
    pub m_checked: usize,
    pub subsets_checked: usize,
}

impl Cond4Report {
    pub fn margin(&self) -> f64 {
        self.sampled_margin.min(self.adversarial_margin)
    }
}

/// The partial-sum condition over the sampled subsets and the adversarial subset.
pub fn verify_condition_4(
    spectrum: &[CoeffBlock],
    f: &StepFunction,
    e_set: &IntervalSet,
    epsilon: f64,
    subsets: &[IntervalSet],
    sweep: MSweep,
    grid: &Grid,
) -> Result<Cond4Report> {
    for e in subsets {
        if !e.is_subset_of(e_set, 1e-12) {
            return Err(Error::input("partial-sum subset is not contained in E"));
        }
    }
    let fpc = f.to_piecewise();
    let f_on: Vec<f64> = subsets.iter().map(|e| fpc.integrate_abs_on(e)).collect();
    let ms = partial_sum_points(spectrum, sweep);
    let mut sampled = epsilon;
    let mut adversarial = epsilon;
    let mut check = |values: &[f64]| -> Result<()> {
        let prefix = AbsPrefix::new(values, grid)?;
        for (e, fe) in subsets.iter().zip(&f_on) {
            sampled = sampled.min(epsilon + fe - prefix.integrate(e));
        }
        let excess = integrate_abs_excess(values, grid, &fpc, e_set)?;
        adversarial = adversarial.min(epsilon - excess);
        Ok(())
    };
    match sweep {
        MSweep::BandPoints => {
            for &m in &ms {
                let values = eval_partial_sum(spectrum, m, grid)?;
                check(&values)?;
            }
        }
        MSweep::Exhaustive => {
            let mut sweep = PartialSumSweep::new(grid.log2_points());
            let mut pending = ms.iter().peekable();
            for b in spectrum {
                for (k, c) in b.iter() {
                    sweep.add(k, c);
                    if pending.peek() == Some(&&k) {
                        pending.next();
                        check(sweep.values())?;
                    }
                }
            }
        }
    }
    Ok(Cond4Report {
        sampled_margin: sampled,
        adversarial_margin: adversarial,
        m_checked: ms.len(),
        subsets_checked: subsets.len(),
    })
}

/// Runs the construction on `f` exactly as given (no refinement) and
/// measures every condition without judging it.
pub fn construct(
    f: &StepFunction,
    params: &LemmaParams,
    grid: &Grid,
    cond4: &Cond4Options,
) -> Result<LemmaOutput> {
    let eps = params.internal_epsilon;
    let base = 1u64 << f.level();
    let cap = grid.max_resolved_freq();
    let mut blocks = Vec::new();
    let mut spectrum = Vec::new();
    let mut e_parts = Vec::new();
    let mut n_prev = params.n0;
    let mut nu_prev = 0u64;
    let mut s = 0usize;
    for (delta, gamma) in f.pieces() {
        if gamma == 0.0 {
            e_parts.push(delta);
            continue;
        }
        s += 1;
        let (nu, low) = choose_modulation(gamma, delta, n_prev, eps, nu_prev + 1, base, cap)
            .map_err(|e| resolution(format!("piece {s}: {e}")))?;
        let budget = eps / 2f64.powi(s as i32 + 1);
        let (n_s, block, err) = choose_truncation(s, gamma, delta, nu, eps, n_prev, budget, grid)
            .map_err(|e| match e {
                Error::Invariant(msg) => resolution(format!("piece {s}: {msg}")),
                other => other,
            })?;
        e_parts.extend(level_set_e(gamma, delta, nu, eps).pieces().iter().copied());
        blocks.push(ModulatedBlock {
            s,
            gamma,
            delta_s: delta,
            nu,
            band: (n_prev, n_s),
            low_band_max: low,
            truncation_error: err,
        });
        spectrum.push(block);
        n_prev = n_s;
        nu_prev = nu;
    }
    let e_set = IntervalSet::from_intervals(e_parts);
    let report = measure_conditions(f, params, &e_set, &spectrum, grid, cond4)?;
    Ok(LemmaOutput {
        params: params.clone(),
        refined: f.clone(),
        e_set,
        blocks,
        spectrum,
        report,
    })
}

fn resolution(detail: String) -> Error {
    LemmaFailure {
        condition: LemmaCondition::Resolution,
        detail,
        report: None,
    }
    .into()
}

/// Margins of all four conditions for a given `E` and `P`.
pub fn measure_conditions(
    f: &StepFunction,
    params: &LemmaParams,
    e_set: &IntervalSet,
    spectrum: &[CoeffBlock],
    grid: &Grid,
    cond4: &Cond4Options,
) -> Result<LemmaReport> {
    let eps = params.epsilon;
    let measure_e = e_set.measure();
    let fpc = f.to_piecewise();
    let p = eval_partial_sum(spectrum, u64::MAX, grid)?;
    let l1_on_e = integrate_abs_diff(&p, grid, &fpc, e_set)?;
    let budget = coefficient_budget(spectrum, &params.omega);
    let energy: f64 = spectrum.iter().map(CoeffBlock::energy).sum();
    let max_coeff = spectrum.iter().map(CoeffBlock::max_abs).fold(0.0, f64::max);
    let subsets = sample_subsets(e_set, cond4.subsets.max(2), cond4.max_pieces, cond4.seed)?;
    let c4 = verify_condition_4(spectrum, f, e_set, eps, &subsets, cond4.sweep, grid)?;
    Ok(LemmaReport {
        level: f.level(),
        measure_e,
        margin_measure: measure_e - (TWO_PI - eps),
        l1_on_e,
        margin_approximation: eps - l1_on_e,
        budget,
        margin_budget: eps - budget,
        budget_chain: params.eta * energy,
        margin_partial_sums: c4.margin(),
        partial_sum_excess: eps - c4.adversarial_margin,
        max_coeff,
        delta: params.delta,
        m_checked: c4.m_checked,
        subsets_checked: c4.subsets_checked,
    })
}

/// Builds `E` and `P` for `f`, deepening the dyadic partition while a
/// failure can be cured by smaller pieces.
pub fn build_lemma(
    f: &StepFunction,
    params: &LemmaParams,
    grid: &Grid,
    cond4: &Cond4Options,
) -> Result<LemmaOutput> {
    let mut level = f.level();
    let mut last: Option<LemmaFailure> = None;
    loop {
        let fr = f.refine_to(level)?;
        match construct(&fr, params, grid, cond4) {
            Ok(out) => match out.report.failed() {
                None => return Ok(out),
                Some(cond) => {
                    let failure = LemmaFailure {
                        condition: cond,
                        detail: format!("at dyadic level {level}"),
                        report: Some(out.report.clone()),
                    };
                    if !cond.refinable() || level >= MAX_LEVEL {
                        return Err(failure.into());
                    }
                    last = Some(failure);
                }
            },
            Err(Error::Lemma(fail)) if fail.condition == LemmaCondition::Resolution => {
                return Err(match last {
                    Some(mut prev) => {
                        prev.detail = format!(
                            "{}; deepening to level {level} exhausted the grid ({})",
                            prev.detail, fail.detail
                        );
                        prev.into()
                    }
                    None => Error::Lemma(fail),
                });
            }
            Err(e) => return Err(e),
        }
        level += 1;
    }
}
