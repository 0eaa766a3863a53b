//! Assembly of the universal series from consecutive lemma applications,
//! and the weight under which it is universal.
//!
//! Block `s` approximates the `s`-th step function with tolerance
//! `2^{-2(s+1)}` in the band `[N_{s-1}, N_s)`, starting from `N_0 = 1`.
//! The weight is `1` on a large set `E` and tiny, explicitly computed
//! constants on the rings where late blocks may misbehave.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lemma::{build_lemma, measure_conditions, Cond4Options, LemmaParams, LemmaReport};
use crate::measure::{integrate_abs_diff, AbsPrefix, Grid, IntervalSet, TWO_PI};
use crate::step::{enumerate_step, StepFunction};
use crate::trig::{check_bands, coefficient_budget, eval_partial_sum, CoeffBlock, Modulus, PartialSumSweep};

/// Lemma tolerance for block `s`: `2^{-2(s+1)}`.
pub fn block_epsilon(s: usize) -> f64 {
    2f64.powi(-2 * (s as i32 + 1))
}

/// Where the step functions `f_s` come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FunctionSource {
    /// `f_s` is the `s`-th function of the fixed enumeration.
    Enumeration,
    /// `f_s` is the `s`-th entry of the list (1-based).
    Explicit { functions: Vec<StepFunction> },
}

impl FunctionSource {
    pub fn function(&self, s: usize) -> Result<StepFunction> {
        match self {
            FunctionSource::Enumeration => enumerate_step(s as u64),
            FunctionSource::Explicit { functions } => functions
                .get(s.wrapping_sub(1))
                .cloned()
                .ok_or_else(|| Error::input(format!("explicit source has no function {s}"))),
        }
    }

    pub fn len(&self) -> Option<usize> {
        match self {
            FunctionSource::Enumeration => None,
            FunctionSource::Explicit { functions } => Some(functions.len()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesBlock {
    pub s: usize,
    pub f: StepFunction,
    #[serde(rename = "E")]
    pub e_set: IntervalSet,
    pub lo: u64,
    pub hi: u64,
    pub bands: Vec<CoeffBlock>,
    pub report: LemmaReport,
}

impl SeriesBlock {
    pub fn budget(&self, omega: &Modulus) -> f64 {
        coefficient_budget(&self.bands, omega)
    }

    pub fn max_abs(&self) -> f64 {
        self.bands.iter().map(CoeffBlock::max_abs).fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniversalSeries {
    pub omega: Modulus,
    pub source: FunctionSource,
    pub blocks: Vec<SeriesBlock>,
}

impl UniversalSeries {
    pub fn new(source: FunctionSource, omega: Modulus) -> Result<Self> {
        omega.validate()?;
        Ok(UniversalSeries {
            omega,
            source,
            blocks: Vec::new(),
        })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// `N_S`, one past the last built frequency (`1` when empty).
    pub fn end(&self) -> u64 {
        self.blocks.last().map_or(1, |b| b.hi)
    }

    pub fn block(&self, s: usize) -> Option<&SeriesBlock> {
        self.blocks.get(s.wrapping_sub(1))
    }

    pub fn bands(&self) -> impl Iterator<Item = &CoeffBlock> {
        self.blocks.iter().flat_map(|b| b.bands.iter())
    }

    /// Block index owning frequency `|k|`, if built.
    pub fn block_of(&self, k: u64) -> Option<usize> {
        let i = self.blocks.partition_point(|b| b.hi <= k);
        self.blocks.get(i).filter(|b| b.lo <= k).map(|b| b.s)
    }

    /// `C_k` of the assembled series (zero outside the built range).
    pub fn coefficient(&self, k: i64) -> Complex64 {
        let a = k.unsigned_abs();
        self.block_of(a)
            .and_then(|s| self.block(s))
            .map(|b| b.bands.iter().map(|band| band.get(k)).sum())
            .unwrap_or_default()
    }

    /// Builds blocks until the depth reaches `depth`.
    pub fn extend_to(&mut self, depth: usize, grid: &Grid, cond4: &Cond4Options) -> Result<()> {
        while self.blocks.len() < depth {
            let s = self.blocks.len() + 1;
            let block = self
                .build_block(s, grid, cond4)
                .map_err(|e| Error::SeriesBlock {
                    s,
                    source: Box::new(e),
                })?;
            self.blocks.push(block);
        }
        Ok(())
    }

    fn build_block(&self, s: usize, grid: &Grid, cond4: &Cond4Options) -> Result<SeriesBlock> {
        let f = self.source.function(s)?;
        let lo = self.end();
        let eps = block_epsilon(s);
        let params = LemmaParams::with_start(&f, eps, lo, self.omega.clone())?;
        let out = build_lemma(&f, &params, grid, cond4)?;
        let mut bands = out.spectrum;
        for b in bands.iter_mut() {
            *b = relabel(b, s)?;
        }
        let mut report = out.report;
        if bands.is_empty() {
            // Keep N_s > N_{s-1} with a single zero coefficient.
            bands.push(CoeffBlock::zeros(s, lo, lo + 1)?);
            report = measure_conditions(&out.refined, &params, &out.e_set, &bands, grid, cond4)?;
        }
        let hi = bands.last().expect("nonempty").hi();
        let block = SeriesBlock {
            s,
            f,
            e_set: out.e_set,
            lo,
            hi,
            bands,
            report,
        };
        check_block(&block, &self.omega)?;
        Ok(block)
    }

    /// Re-checks band order and the per-block invariants.
    pub fn validate(&self) -> Result<()> {
        let bands: Vec<CoeffBlock> = self.bands().cloned().collect();
        check_bands(&bands)?;
        let mut prev = 1;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.s != i + 1 || b.lo != prev || b.hi <= b.lo {
                return Err(Error::invariant(format!("block {} has band [{}, {})", b.s, b.lo, b.hi)));
            }
            check_block(b, &self.omega)?;
            prev = b.hi;
        }
        Ok(())
    }
}

fn relabel(b: &CoeffBlock, s: usize) -> Result<CoeffBlock> {
    CoeffBlock::new(s, b.lo(), b.coeffs().to_vec())
}

fn check_block(b: &SeriesBlock, omega: &Modulus) -> Result<()> {
    let eps = block_epsilon(b.s);
    let missing = TWO_PI - b.e_set.measure();
    if !(missing < eps) {
        return Err(Error::invariant(format!(
            "block {}: |[0,2π] \\ E_s| = {missing:.3e} is not below {eps:.3e}",
            b.s
        )));
    }
    if !(b.report.l1_on_e < eps) {
        return Err(Error::invariant(format!(
            "block {}: ∫_E|P - f| = {:.3e} is not below {eps:.3e}",
            b.s, b.report.l1_on_e
        )));
    }
    let budget = b.budget(omega);
    if !(budget < 4.0 * eps) {
        return Err(Error::invariant(format!(
            "block {}: budget {budget:.3e} is not below {:.3e}",
            b.s,
            4.0 * eps
        )));
    }
    if b.bands.iter().any(|band| band.lo() < b.lo || band.hi() > b.hi) {
        return Err(Error::invariant(format!("block {} has a band outside its range", b.s)));
    }
    Ok(())
}

/// Series of depth `depth` over the enumeration.
pub fn build_universal_series(
    depth: usize,
    omega: Modulus,
    grid: &Grid,
    cond4: &Cond4Options,
) -> Result<UniversalSeries> {
    if depth == 0 {
        return Err(Error::input("series depth must be at least 1"));
    }
    let mut series = UniversalSeries::new(FunctionSource::Enumeration, omega)?;
    series.extend_to(depth, grid, cond4)?;
    Ok(series)
}

/// Samples per period of the top frequency used for sup norms.
pub const SUP_SAMPLES_PER_PERIOD: u64 = 16;

/// `h_s = sup|f_s| + max_p sup|Σ_{N_{s-1} ≤ |k| < p} C_k e^{ikx}| + 1`.
///
/// `p` runs over the whole band including its end, so the full block sum
/// is covered too. Sup norms are taken on a uniform grid with
/// `per_period` samples per period of the top frequency.
pub fn h_normalizer(block: &SeriesBlock, per_period: u64) -> f64 {
    let mut max_sup = 0.0f64;
    if block.bands.iter().any(|b| !b.is_zero()) {
        let mut sweep = PartialSumSweep::for_max_freq(block.hi, per_period);
        for band in &block.bands {
            for (k, c) in band.iter() {
                if c.norm_sqr() == 0.0 {
                    continue;
                }
                sweep.add(k, c);
                max_sup = max_sup.max(sweep.sup_norm());
            }
        }
    }
    block.f.sup_norm() + max_sup + 1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightLevel {
    pub n: usize,
    pub mu_n: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ring {
    pub n: usize,
    pub set: IntervalSet,
}

/// The weight `μ`: `1` on `E ∪ ([0,2π] \ B)` and `μ_n` on `Ω_n \ Ω_{n-1}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightSpec {
    pub epsilon: f64,
    pub n0: usize,
    pub depth: usize,
    /// `h_1 ..= h_S`.
    pub h: Vec<f64>,
    pub levels: Vec<WeightLevel>,
    pub rings: Vec<Ring>,
    #[serde(rename = "E")]
    pub e_set: IntervalSet,
    #[serde(rename = "B")]
    pub b_set: IntervalSet,
    /// Bound on the measure missed by stopping the intersections at depth `S`.
    pub truncation_error: f64,
}

/// `n0 = floor(log_{1/2} ε) + 1`.
pub fn weight_cutoff(epsilon: f64) -> Result<usize> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::input(format!("weight epsilon must be positive, got {epsilon}")));
    }
    let l = -epsilon.log2();
    // Snap exact powers of two that log2 lands a hair off.
    let r = l.round();
    let l = if (l - r).abs() < 1e-12 { r } else { l };
    Ok((l.floor().max(0.0) as usize) + 1)
}

/// `Ω_n = ∩_{s=n}^{S} E_s`.
pub fn omega_set(series: &UniversalSeries, n: usize) -> IntervalSet {
    series
        .blocks
        .iter()
        .filter(|b| b.s >= n)
        .fold(IntervalSet::full(), |acc, b| acc.intersect(&b.e_set))
}

pub fn build_weight(series: &UniversalSeries, epsilon: f64) -> Result<WeightSpec> {
    let n0 = weight_cutoff(epsilon)?;
    let depth = series.depth();
    if depth <= n0 {
        return Err(Error::InsufficientDepth { depth, needed: n0 });
    }
    let h: Vec<f64> = series
        .blocks
        .iter()
        .map(|b| h_normalizer(b, SUP_SAMPLES_PER_PERIOD))
        .collect();
    let omegas: Vec<IntervalSet> = (n0..=depth).map(|n| omega_set(series, n)).collect();
    let e_set = omegas[0].clone();
    let b_set = omegas.last().expect("depth > n0").clone();
    let mut levels = Vec::new();
    let mut rings = Vec::new();
    for n in n0 + 1..=depth {
        let prod: f64 = h[..n].iter().product();
        let mu_n = 1.0 / (4f64.powi(n as i32) * prod);
        levels.push(WeightLevel { n, mu_n });
        let ring = omegas[n - n0].complement_within(&omegas[n - n0 - 1]);
        rings.push(Ring { n, set: ring });
    }
    let w = WeightSpec {
        epsilon,
        n0,
        depth,
        h,
        levels,
        rings,
        e_set,
        b_set,
        truncation_error: block_epsilon(depth + 1) * 4.0 / 3.0,
    };
    let a = check_property_a(&w)?;
    if !(a.measure_not_one + w.truncation_error < epsilon) {
        return Err(Error::invariant(format!(
            "|{{μ ≠ 1}}| = {:.3e} (+{:.3e}) is not below ε = {epsilon}",
            a.measure_not_one, w.truncation_error
        )));
    }
    Ok(w)
}

impl WeightSpec {
    pub fn mu(&self, n: usize) -> Option<f64> {
        self.levels.iter().find(|l| l.n == n).map(|l| l.mu_n)
    }

    /// The set where `μ = 1`.
    pub fn unit_set(&self) -> IntervalSet {
        let rings = self
            .rings
            .iter()
            .fold(IntervalSet::empty(), |acc, r| acc.union(&r.set));
        rings.complement()
    }

    /// `(set, value)` pairs partitioning the circle by weight level.
    pub fn regions(&self) -> Vec<(IntervalSet, f64)> {
        let mut out = vec![(self.unit_set(), 1.0)];
        for (r, l) in self.rings.iter().zip(&self.levels) {
            out.push((r.set.clone(), l.mu_n));
        }
        out
    }
}

pub fn weight_eval(w: &WeightSpec, x: f64) -> f64 {
    if w.e_set.contains(x) {
        return 1.0;
    }
    for (r, l) in w.rings.iter().zip(&w.levels) {
        if r.set.contains(x) {
            return l.mu_n;
        }
    }
    1.0
}

pub fn weight_samples(w: &WeightSpec, grid: &Grid) -> Vec<f64> {
    grid.sample(|x| weight_eval(w, x))
}

/// `∫_A |v| μ`, split exactly along the weight's level sets.
pub fn weighted_abs_integral(values: &[f64], grid: &Grid, w: &WeightSpec, set: &IntervalSet) -> Result<f64> {
    let prefix = AbsPrefix::new(values, grid)?;
    Ok(w.regions()
        .iter()
        .map(|(r, mu)| mu * prefix.integrate(&r.intersect(set)))
        .sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyA {
    pub min_mu: f64,
    pub max_mu: f64,
    pub measure_not_one: f64,
    pub epsilon: f64,
    pub truncation_error: f64,
    /// Worst `|μ_n 2^{2n} Π h_s - 1|`.
    pub normalization_defect: f64,
    pub partition_defect: f64,
}

impl PropertyA {
    pub fn holds(&self) -> bool {
        self.min_mu > 0.0
            && self.max_mu <= 1.0
            && self.measure_not_one + self.truncation_error < self.epsilon
            && self.normalization_defect < 1e-12
            && self.partition_defect < 1e-12
    }
}

pub fn check_property_a(w: &WeightSpec) -> Result<PropertyA> {
    let mut min_mu: f64 = 1.0;
    let mut max_mu: f64 = 1.0;
    let mut defect: f64 = 0.0;
    let mut prev = 1.0;
    for l in &w.levels {
        if !(l.mu_n < prev) {
            return Err(Error::invariant(format!("μ_{} = {} does not decrease", l.n, l.mu_n)));
        }
        prev = l.mu_n;
        min_mu = min_mu.min(l.mu_n);
        max_mu = max_mu.max(l.mu_n);
        let prod: f64 = w.h[..l.n].iter().product();
        defect = defect.max((l.mu_n * 4f64.powi(l.n as i32) * prod - 1.0).abs());
    }
    let measure_not_one: f64 = w.rings.iter().map(|r| r.set.measure()).sum();
    let total: f64 = w.regions().iter().map(|(r, _)| r.measure()).sum();
    Ok(PropertyA {
        min_mu,
        max_mu,
        measure_not_one,
        epsilon: w.epsilon,
        truncation_error: w.truncation_error,
        normalization_defect: defect,
        partition_defect: (total - TWO_PI).abs(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyB {
    pub block_budgets: Vec<f64>,
    pub cumulative_budget: f64,
    /// `Σ_{s ≤ S} 2^{-2s}`.
    pub budget_bound: f64,
    pub first_band_max: f64,
    pub last_band_max: f64,
    /// Max `|C_k|` of the first block with a nonzero coefficient.
    pub first_nonzero_band_max: f64,
}

impl PropertyB {
    pub fn budgets_hold(&self) -> bool {
        self.block_budgets
            .iter()
            .enumerate()
            .all(|(i, &b)| b < 4f64.powi(-(i as i32 + 1)))
            && (self.block_budgets.is_empty() || self.cumulative_budget < self.budget_bound)
    }

    /// Needs two blocks; a shorter series has nothing to compare.
    pub fn decay_witnessed(&self) -> bool {
        self.block_budgets.len() < 2 || self.last_band_max < self.first_band_max
    }
}

pub fn check_property_b(series: &UniversalSeries) -> PropertyB {
    let block_budgets: Vec<f64> = series.blocks.iter().map(|b| b.budget(&series.omega)).collect();
    let maxes: Vec<f64> = series.blocks.iter().map(SeriesBlock::max_abs).collect();
    PropertyB {
        cumulative_budget: block_budgets.iter().sum(),
        budget_bound: (1..=series.depth()).map(|s| 4f64.powi(-(s as i32))).sum(),
        block_budgets,
        first_band_max: maxes.first().copied().unwrap_or(0.0),
        last_band_max: maxes.last().copied().unwrap_or(0.0),
        first_nonzero_band_max: maxes.iter().copied().find(|&m| m > 0.0).unwrap_or(0.0),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbReport {
    pub a: PropertyA,
    pub b: PropertyB,
}

pub fn verify_a_b(series: &UniversalSeries, w: &WeightSpec) -> Result<AbReport> {
    Ok(AbReport {
        a: check_property_a(w)?,
        b: check_property_b(series),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChainKind {
    /// `∫_{Ω_s^c} |S_p| μ < (1/3) 2^{-2s}`.
    OffOmega,
    /// `∫ |P_s - f_s| μ < 2^{-2s}`.
    BlockError,
    /// `∫ |S_p| μ < ∫ |f_s| μ + 2^{-2s}`.
    PartialSum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainCheck {
    pub s: usize,
    pub p: u64,
    pub kind: ChainKind,
    pub lhs: f64,
    pub rhs: f64,
    pub tol: f64,
}

impl ChainCheck {
    pub fn holds(&self) -> bool {
        self.lhs < self.rhs + self.tol
    }
}

/// Ends of every sub-band of a block, i.e. the `p` where partial block
/// sums are checked.
pub fn band_ends(block: &SeriesBlock) -> Vec<u64> {
    let mut ps: Vec<u64> = block
        .bands
        .iter()
        .flat_map(|b| [b.lo(), b.hi()])
        .chain([block.lo, block.hi])
        .collect();
    ps.sort_unstable();
    ps.dedup();
    ps
}

/// Numerical tolerance for an analytic bound checked by quadrature.
pub fn quadrature_tolerance(values: &[f64], grid: &Grid) -> f64 {
    10.0 * grid.cell() * values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// The three chain inequalities for every `s` with `n0 ≤ s ≤ S`.
pub fn chain_bounds(series: &UniversalSeries, w: &WeightSpec, grid: &Grid) -> Result<Vec<ChainCheck>> {
    let mut out = Vec::new();
    for s in w.n0..=series.depth() {
        let block = series.block(s).expect("s within depth");
        let scale = 4f64.powi(-(s as i32));
        let off_omega = omega_set(series, s).complement();
        let fpc = block.f.to_piecewise();
        let f_mu: f64 = w
            .regions()
            .iter()
            .map(|(r, mu)| mu * fpc.integrate_abs_on(r))
            .sum();
        for p in band_ends(block) {
            let values = eval_partial_sum(&block.bands, p - 1, grid)?;
            let tol = quadrature_tolerance(&values, grid);
            out.push(ChainCheck {
                s,
                p,
                kind: ChainKind::OffOmega,
                lhs: weighted_abs_integral(&values, grid, w, &off_omega)?,
                rhs: scale / 3.0,
                tol,
            });
            out.push(ChainCheck {
                s,
                p,
                kind: ChainKind::PartialSum,
                lhs: weighted_abs_integral(&values, grid, w, &IntervalSet::full())?,
                rhs: f_mu + scale,
                tol,
            });
        }
        let values = eval_partial_sum(&block.bands, u64::MAX, grid)?;
        let mut lhs = 0.0;
        for (r, mu) in w.regions() {
            lhs += mu * integrate_abs_diff(&values, grid, &fpc, &r)?;
        }
        out.push(ChainCheck {
            s,
            p: block.hi,
            kind: ChainKind::BlockError,
            lhs,
            rhs: scale,
            tol: quadrature_tolerance(&values, grid) + 10.0 * grid.cell() * block.f.sup_norm(),
        });
    }
    Ok(out)
}
