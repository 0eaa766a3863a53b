//! On-disk artifacts and their re-verification from stored data alone.
//!
//! Every stored measurement is recomputed from the stored inputs and must
//! agree to a relative `1e-9`; every stored inequality must still hold.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lemma::{measure_conditions, Cond4Options, LemmaOutput, LemmaParams, LemmaReport};
use crate::measure::{Grid, IntervalSet};
use crate::rearrange::{round_bound, Emission, EmissionKind, RoundRecord, RunOutput, Target};
use crate::step::{weighted_l1_distance, StepFunction};
use crate::trig::{check_bands, eval_partial_sum, CoeffBlock, Modulus};
use crate::universal::{
    block_epsilon, build_weight, chain_bounds, check_property_a, check_property_b, quadrature_tolerance,
    weight_samples, ChainCheck, FunctionSource, PropertyA, PropertyB, SeriesBlock, UniversalSeries, WeightSpec,
};

pub const REL_TOL: f64 = 1e-9;

/// Agreement to `REL_TOL` relative to the larger magnitude.
pub fn close(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= REL_TOL * a.abs().max(b.abs())
}

fn sets_close(a: &IntervalSet, b: &IntervalSet) -> bool {
    a.pieces().len() == b.pieces().len()
        && a.pieces()
            .iter()
            .zip(b.pieces())
            .all(|(p, q)| (p.lo - q.lo).abs() < 1e-12 && (p.hi - q.hi).abs() < 1e-12)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub ok: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn push(&mut self, name: impl Into<String>, ok: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.into(),
            ok,
            detail: detail.into(),
        });
    }

    fn value(&mut self, name: &str, stored: f64, fresh: f64) {
        self.push(
            name,
            close(stored, fresh),
            format!("stored {stored:.17e}, recomputed {fresh:.17e}"),
        );
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.ok)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.ok)
    }

    pub fn extend(&mut self, other: VerifyReport) {
        self.checks.extend(other.checks);
    }
}

fn compare_reports(rep: &mut VerifyReport, tag: &str, stored: &LemmaReport, fresh: &LemmaReport) {
    let pairs = [
        ("measure_e", stored.measure_e, fresh.measure_e),
        ("margin_measure", stored.margin_measure, fresh.margin_measure),
        ("l1_on_e", stored.l1_on_e, fresh.l1_on_e),
        ("margin_approximation", stored.margin_approximation, fresh.margin_approximation),
        ("budget", stored.budget, fresh.budget),
        ("margin_budget", stored.margin_budget, fresh.margin_budget),
        ("budget_chain", stored.budget_chain, fresh.budget_chain),
        ("margin_partial_sums", stored.margin_partial_sums, fresh.margin_partial_sums),
        ("partial_sum_excess", stored.partial_sum_excess, fresh.partial_sum_excess),
        ("max_coeff", stored.max_coeff, fresh.max_coeff),
        ("delta", stored.delta, fresh.delta),
    ];
    for (name, a, b) in pairs {
        rep.value(&format!("{tag}: {name}"), a, b);
    }
    rep.push(
        format!("{tag}: sweep size"),
        stored.level == fresh.level
            && stored.m_checked == fresh.m_checked
            && stored.subsets_checked == fresh.subsets_checked,
        format!(
            "level {}/{}, m {}/{}, subsets {}/{}",
            stored.level, fresh.level, stored.m_checked, fresh.m_checked, stored.subsets_checked, fresh.subsets_checked
        ),
    );
    let failed = fresh.failed();
    rep.push(
        format!("{tag}: all conditions"),
        failed.is_none(),
        failed.map_or_else(|| "all margins positive".to_string(), |c| format!("{c} fails")),
    );
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaArtifact {
    pub grid_log2: u32,
    pub cond4: Cond4Options,
    #[serde(flatten)]
    pub output: LemmaOutput,
}

fn check_params(rep: &mut VerifyReport, tag: &str, stored: &LemmaParams, fresh: &LemmaParams) {
    rep.value(&format!("{tag}: internal epsilon"), stored.internal_epsilon, fresh.internal_epsilon);
    rep.value(&format!("{tag}: eta"), stored.eta, fresh.eta);
    rep.value(&format!("{tag}: delta"), stored.delta, fresh.delta);
}

pub fn verify_lemma(a: &LemmaArtifact) -> Result<VerifyReport> {
    let grid = Grid::new(a.grid_log2)?;
    let out = &a.output;
    let p = &out.params;
    let mut rep = VerifyReport::default();
    let fresh_params = LemmaParams::with_start(&out.refined, p.epsilon, p.n0, p.omega.clone())?;
    check_params(&mut rep, "lemma", p, &fresh_params);
    rep.push(
        "lemma: band order",
        check_bands(&out.spectrum).is_ok() && out.spectrum.first().is_none_or(|b| b.lo() >= p.n0),
        "bands ascending, disjoint and from N0 up",
    );
    let fresh = measure_conditions(&out.refined, p, &out.e_set, &out.spectrum, &grid, &a.cond4)?;
    compare_reports(&mut rep, "lemma", &out.report, &fresh);
    Ok(rep)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockMeta {
    pub s: usize,
    pub f: StepFunction,
    #[serde(rename = "E")]
    pub e_set: IntervalSet,
    pub lo: u64,
    pub hi: u64,
    pub margins: LemmaReport,
}

/// A series as stored: one flat band list plus per-block metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesArtifact {
    pub grid_log2: u32,
    pub cond4: Cond4Options,
    pub omega: Modulus,
    pub source: FunctionSource,
    pub bands: Vec<CoeffBlock>,
    pub blocks: Vec<BlockMeta>,
}

impl SeriesArtifact {
    pub fn new(series: &UniversalSeries, grid: &Grid, cond4: &Cond4Options) -> Self {
        SeriesArtifact {
            grid_log2: grid.log2_points(),
            cond4: *cond4,
            omega: series.omega.clone(),
            source: series.source.clone(),
            bands: series.bands().cloned().collect(),
            blocks: series
                .blocks
                .iter()
                .map(|b| BlockMeta {
                    s: b.s,
                    f: b.f.clone(),
                    e_set: b.e_set.clone(),
                    lo: b.lo,
                    hi: b.hi,
                    margins: b.report.clone(),
                })
                .collect(),
        }
    }

    pub fn to_series(&self) -> Result<UniversalSeries> {
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for m in &self.blocks {
            let bands: Vec<CoeffBlock> = self.bands.iter().filter(|b| b.s() == m.s).cloned().collect();
            if bands.is_empty() {
                return Err(Error::input(format!("series file has no bands for block {}", m.s)));
            }
            blocks.push(SeriesBlock {
                s: m.s,
                f: m.f.clone(),
                e_set: m.e_set.clone(),
                lo: m.lo,
                hi: m.hi,
                bands,
                report: m.margins.clone(),
            });
        }
        let owned: usize = blocks.iter().map(|b| b.bands.len()).sum();
        if owned != self.bands.len() {
            return Err(Error::input("series file has bands that belong to no block"));
        }
        Ok(UniversalSeries {
            omega: self.omega.clone(),
            source: self.source.clone(),
            blocks,
        })
    }
}

pub fn verify_series(a: &SeriesArtifact) -> Result<VerifyReport> {
    let grid = Grid::new(a.grid_log2)?;
    let mut rep = VerifyReport::default();
    let series = a.to_series()?;
    let valid = series.validate();
    rep.push(
        "series: structure",
        valid.is_ok(),
        valid.err().map_or_else(|| "bands chained, invariants hold".to_string(), |e| e.to_string()),
    );
    for b in &series.blocks {
        let tag = format!("series block {}", b.s);
        let expected = series.source.function(b.s)?;
        rep.push(format!("{tag}: step function"), expected == b.f, "matches the source");
        let params = LemmaParams::with_start(&b.f, block_epsilon(b.s), b.lo, series.omega.clone())?;
        let f = b.f.refine_to(b.report.level)?;
        let fresh = measure_conditions(&f, &params, &b.e_set, &b.bands, &grid, &a.cond4)?;
        compare_reports(&mut rep, &tag, &b.report, &fresh);
    }
    Ok(rep)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightArtifact {
    pub grid_log2: u32,
    #[serde(flatten)]
    pub weight: WeightSpec,
    pub property_a: PropertyA,
    pub property_b: PropertyB,
    pub chains: Vec<ChainCheck>,
}

impl WeightArtifact {
    pub fn new(series: &UniversalSeries, weight: WeightSpec, grid: &Grid) -> Result<Self> {
        Ok(WeightArtifact {
            grid_log2: grid.log2_points(),
            property_a: check_property_a(&weight)?,
            property_b: check_property_b(series),
            chains: chain_bounds(series, &weight, grid)?,
            weight,
        })
    }
}

fn compare_a(rep: &mut VerifyReport, stored: &PropertyA, fresh: &PropertyA) {
    rep.value("weight: min mu", stored.min_mu, fresh.min_mu);
    rep.value("weight: measure mu != 1", stored.measure_not_one, fresh.measure_not_one);
    rep.value("weight: truncation error", stored.truncation_error, fresh.truncation_error);
    rep.push(
        "weight: property A",
        fresh.holds(),
        format!(
            "mu in [{:.3e}, {}], |mu != 1| + bar = {:.3e} vs {}, normalization defect {:.1e}",
            fresh.min_mu,
            fresh.max_mu,
            fresh.measure_not_one + fresh.truncation_error,
            fresh.epsilon,
            fresh.normalization_defect
        ),
    );
}

/// Checks a weight file; with its series, everything is rebuilt and compared.
pub fn verify_weight(a: &WeightArtifact, series: Option<&UniversalSeries>) -> Result<VerifyReport> {
    let grid = Grid::new(a.grid_log2)?;
    let mut rep = VerifyReport::default();
    let w = &a.weight;
    compare_a(&mut rep, &a.property_a, &check_property_a(w)?);
    for c in &a.chains {
        rep.push(
            format!("weight: chain {:?} s={} p={}", c.kind, c.s, c.p),
            c.holds(),
            format!("{:.6e} < {:.6e} + {:.1e}", c.lhs, c.rhs, c.tol),
        );
    }
    let Some(series) = series else {
        return Ok(rep);
    };
    let fresh = build_weight(series, w.epsilon)?;
    rep.push("weight: cutoff", fresh.n0 == w.n0 && fresh.depth == w.depth, format!("n0 {} depth {}", w.n0, w.depth));
    let h_ok = fresh.h.len() == w.h.len() && fresh.h.iter().zip(&w.h).all(|(a, b)| close(*a, *b));
    rep.push("weight: h normalizers", h_ok, format!("{} values", w.h.len()));
    let mu_ok = fresh.levels.len() == w.levels.len()
        && fresh.levels.iter().zip(&w.levels).all(|(a, b)| a.n == b.n && close(a.mu_n, b.mu_n));
    rep.push("weight: levels", mu_ok, format!("{} levels", w.levels.len()));
    let sets_ok = sets_close(&fresh.e_set, &w.e_set)
        && sets_close(&fresh.b_set, &w.b_set)
        && fresh.rings.len() == w.rings.len()
        && fresh.rings.iter().zip(&w.rings).all(|(a, b)| a.n == b.n && sets_close(&a.set, &b.set));
    rep.push("weight: sets", sets_ok, "E, B and rings");
    let b = check_property_b(series);
    rep.value("weight: cumulative budget", a.property_b.cumulative_budget, b.cumulative_budget);
    rep.value("weight: last band max", a.property_b.last_band_max, b.last_band_max);
    rep.push(
        "weight: property B budgets",
        b.budgets_hold(),
        format!("{:.6e} < {:.6e}", b.cumulative_budget, b.budget_bound),
    );
    let chains = chain_bounds(series, w, &grid)?;
    let chains_ok = chains.len() == a.chains.len()
        && chains
            .iter()
            .zip(&a.chains)
            .all(|(x, y)| x.s == y.s && x.p == y.p && x.kind == y.kind && close(x.lhs, y.lhs) && close(x.rhs, y.rhs));
    rep.push("weight: chains recomputed", chains_ok, format!("{} checks", chains.len()));
    Ok(rep)
}

/// Where a rearrangement target comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TargetSpec {
    Zero,
    Sign,
    InverseWeight { max_n: usize },
    SamplesFile { path: String },
}

impl TargetSpec {
    /// `load` reads a samples file; only called for `SamplesFile`.
    pub fn resolve(
        &self,
        w: &WeightSpec,
        grid: &Grid,
        load: impl Fn(&str) -> Result<Vec<f64>>,
    ) -> Result<Target> {
        match self {
            TargetSpec::Zero => Ok(Target::zero(grid)),
            TargetSpec::Sign => Ok(Target::sign(grid)),
            TargetSpec::InverseWeight { max_n } => Ok(Target::inverse_weight(w, *max_n, grid)),
            TargetSpec::SamplesFile { path } => Target::new(load(path)?, grid),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunArtifact {
    pub grid_log2: u32,
    pub target: TargetSpec,
    pub tol: f64,
    pub max_q: usize,
    pub order: Vec<Emission>,
    pub rounds: Vec<RoundRecord>,
}

impl RunArtifact {
    pub fn new(out: &RunOutput, target: TargetSpec, tol: f64, max_q: usize, grid: &Grid) -> Self {
        RunArtifact {
            grid_log2: grid.log2_points(),
            target,
            tol,
            max_q,
            order: out.permuted.order.clone(),
            rounds: out.state.rounds.clone(),
        }
    }
}

/// Replays the emission order against the series and weight.
pub fn verify_run(a: &RunArtifact, series: &UniversalSeries, w: &WeightSpec, target: &Target) -> Result<VerifyReport> {
    let grid = Grid::new(a.grid_log2)?;
    let mut rep = VerifyReport::default();
    let perm = crate::rearrange::PermutedSeries { order: a.order.clone() };
    let support = perm.check_against(series);
    rep.push(
        "run: permutation",
        support.is_ok(),
        support.err().map_or_else(|| "injective and support-contained".to_string(), |e| e.to_string()),
    );
    let mu = weight_samples(w, &grid);
    let mut used = BTreeSet::new();
    let mut partial = vec![0.0; grid.len()];
    let (mut nu_prev, mut m_prev) = (0usize, 0u64);
    for (i, r) in a.rounds.iter().enumerate() {
        let tag = format!("run round {}", r.q);
        let this: Vec<&Emission> = a.order.iter().filter(|e| e.round == r.q).collect();
        let (blk, fill): (Vec<&Emission>, Vec<&Emission>) = this.iter().partition(|e| e.kind == EmissionKind::Block);
        let Some(block) = series.block(r.nu) else {
            rep.push(format!("{tag}: block"), false, format!("index {} beyond the series", r.nu));
            continue;
        };
        let ks: Vec<u64> = blk.iter().map(|e| e.k).collect();
        let expected: Vec<u64> = (block.lo..block.hi).collect();
        let order_ok = r.q == i + 1
            && ks == expected
            && fill.len() == 1
            && fill[0].k == r.m
            && r.nu > nu_prev
            && r.nu as u64 > m_prev
            && r.nu > w.n0 + 1;
        rep.push(format!("{tag}: admissible"), order_ok, format!("nu {} m {}", r.nu, r.m));
        used.extend(ks.iter().copied());
        let minimal = (1..).find(|k| !used.contains(k)).expect("finite set");
        rep.push(format!("{tag}: filler minimal"), minimal == r.m, format!("expected {minimal}, stored {}", r.m));
        used.insert(r.m);

        let coeffs = blk.iter().map(|e| e.coefficient()).collect();
        let mut bands = vec![CoeffBlock::new(0, block.lo, coeffs)?];
        let c = fill[0].coefficient();
        if r.m < block.lo {
            bands.insert(0, CoeffBlock::new(0, r.m, vec![c])?);
        } else {
            bands.push(CoeffBlock::new(0, r.m, vec![c])?);
        }
        let add = eval_partial_sum(&bands, u64::MAX, &grid)?;
        for (p, v) in partial.iter_mut().zip(&add) {
            *p += v;
        }
        let error = weighted_l1_distance(&partial, &target.samples, &mu, &grid)?;
        rep.value(&format!("{tag}: error"), r.error, error);
        let bound = round_bound(r.q, c.norm());
        let tol = quadrature_tolerance(&target.samples, &grid).max(quadrature_tolerance(&partial, &grid));
        rep.push(
            format!("{tag}: bound"),
            close(bound, r.bound) && error < bound + tol,
            format!("{error:.6e} < {bound:.6e} + {tol:.1e}"),
        );
        nu_prev = r.nu;
        m_prev = r.m;
    }
    let total: usize = a.rounds.len();
    rep.push(
        "run: accounting",
        a.order.iter().all(|e| e.round >= 1 && e.round <= total) && total <= a.max_q,
        format!("{total} rounds, {} emissions", a.order.len()),
    );
    Ok(rep)
}

/// Canonical JSON text of an artifact.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::input(format!("serialization failed: {e}")))
}

pub fn from_json<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::input(format!("malformed artifact: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lemma::{build_lemma, Cond4Options};
    use crate::rearrange::rearrange_run;
    use num_complex::Complex64;

    fn demo_lemma() -> LemmaArtifact {
        let g = Grid::new(15).unwrap();
        let f = StepFunction::from_ratios(0, &[(1, 32)]).unwrap();
        let p = LemmaParams::new(&f, 0.4, 3, Modulus::Power { alpha: 1.0 }).unwrap();
        let cond4 = Cond4Options {
            subsets: 10,
            ..Cond4Options::default()
        };
        let output = build_lemma(&f, &p, &g, &cond4).unwrap();
        LemmaArtifact {
            grid_log2: 15,
            cond4,
            output,
        }
    }

    fn zero_series(depth: usize) -> (UniversalSeries, Grid, Cond4Options) {
        let g = Grid::new(12).unwrap();
        let cond4 = Cond4Options::default();
        let source = FunctionSource::Explicit {
            functions: vec![StepFunction::zero(); depth],
        };
        let mut s = UniversalSeries::new(source, Modulus::Power { alpha: 0.5 }).unwrap();
        s.extend_to(depth, &g, &cond4).unwrap();
        (s, g, cond4)
    }

    #[test]
    fn close_is_relative() {
        assert!(close(1.0, 1.0 + 1e-10));
        assert!(!close(1.0, 1.0 + 1e-8));
        assert!(close(0.0, 0.0));
        assert!(!close(0.0, 1e-300));
    }

    #[test]
    fn lemma_round_trip_and_verify() {
        let a = demo_lemma();
        let text = to_json(&a).unwrap();
        let back: LemmaArtifact = from_json(&text).unwrap();
        assert_eq!(to_json(&back).unwrap(), text);
        assert!(text.contains("\"margins\"") && text.contains("\"E\"") && text.contains("\"bands\""));
        let rep = verify_lemma(&back).unwrap();
        assert!(rep.passed(), "{:?}", rep.failures().collect::<Vec<_>>());
    }

    #[test]
    fn lemma_tamper_detected() {
        let mut a = demo_lemma();
        let band = &mut a.output.spectrum[0];
        let (k, c) = band.iter().max_by(|x, y| x.1.norm().total_cmp(&y.1.norm())).unwrap();
        band.set(k, c * 1.1).unwrap();
        assert!(!verify_lemma(&a).unwrap().passed());
    }

    #[test]
    fn series_and_weight_verify() {
        let (s, g, cond4) = zero_series(4);
        let sa = SeriesArtifact::new(&s, &g, &cond4);
        let text = to_json(&sa).unwrap();
        let back: SeriesArtifact = from_json(&text).unwrap();
        assert_eq!(to_json(&back).unwrap(), text);
        assert!(verify_series(&back).unwrap().passed());
        let w = build_weight(&s, 0.3).unwrap();
        let wa = WeightArtifact::new(&s, w, &g).unwrap();
        let wtext = to_json(&wa).unwrap();
        assert!(wtext.contains("\"levels\"") && wtext.contains("\"rings\"") && wtext.contains("\"B\""));
        let wback: WeightArtifact = from_json(&wtext).unwrap();
        assert_eq!(to_json(&wback).unwrap(), wtext);
        let rep = verify_weight(&wback, Some(&back.to_series().unwrap())).unwrap();
        assert!(rep.passed(), "{:?}", rep.failures().collect::<Vec<_>>());
    }

    #[test]
    fn series_tamper_detected() {
        let (s, g, cond4) = zero_series(2);
        let mut sa = SeriesArtifact::new(&s, &g, &cond4);
        let lo = sa.bands[1].lo();
        sa.bands[1].set(lo, Complex64::new(0.01, 0.0)).unwrap();
        assert!(!verify_series(&sa).unwrap().passed());
    }

    #[test]
    fn run_replays() {
        let (mut s, g, _) = zero_series(10);
        for b in s.blocks.iter_mut() {
            let c = Complex64::new(1e-4 * 0.5f64.powi(b.s as i32), 0.0);
            b.bands = vec![CoeffBlock::new(b.s, b.lo, vec![c]).unwrap()];
        }
        let w = build_weight(&s, 0.6).unwrap();
        let t = Target::zero(&g);
        let out = rearrange_run(&t, &s, &w, &g, 1e-12, 3).unwrap();
        let a = RunArtifact::new(&out, TargetSpec::Zero, 1e-12, 3, &g);
        let back: RunArtifact = from_json(&to_json(&a).unwrap()).unwrap();
        let rep = verify_run(&back, &s, &w, &t).unwrap();
        assert!(rep.passed(), "{:?}", rep.failures().collect::<Vec<_>>());
        let mut bad = back.clone();
        bad.order[0].re *= 1.1;
        assert!(!verify_run(&bad, &s, &w, &t).unwrap().passed());
    }
}
