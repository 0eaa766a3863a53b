//! Greedy rearrangement of the universal series towards a target in the
//! weighted space.
//!
//! Round `q` picks a step function close to the current residual, emits
//! the whole block the series holds for it, then emits the smallest
//! frequency not used so far as a filler term. Every emitted entry stands
//! for the Hermitian pair `C_k e^{ikx} + C_{-k} e^{-ikx}`.

use std::collections::BTreeSet;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lemma::Cond4Options;
use crate::measure::{Grid, TWO_PI};
use crate::step::weighted_l1_distance;
use crate::trig::{eval_partial_sum, CoeffBlock};
use crate::universal::{build_weight, quadrature_tolerance, weight_samples, UniversalSeries, WeightSpec};

/// A target function given by its grid samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub samples: Vec<f64>,
}

impl Target {
    pub fn new(samples: Vec<f64>, grid: &Grid) -> Result<Self> {
        if samples.len() != grid.len() {
            return Err(Error::input(format!(
                "target has {} samples, grid has {}",
                samples.len(),
                grid.len()
            )));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("target samples must be finite"));
        }
        Ok(Target { samples })
    }

    pub fn zero(grid: &Grid) -> Self {
        Target {
            samples: vec![0.0; grid.len()],
        }
    }

    /// `sign(π - x)`, with `0` at `x = π`.
    pub fn sign(grid: &Grid) -> Self {
        Target {
            samples: grid.sample(|x| {
                let d = std::f64::consts::PI - x;
                if d == 0.0 {
                    0.0
                } else {
                    d.signum()
                }
            }),
        }
    }

    /// `1/μ_n` on the ring of level `n` for `n ≤ max_n`, zero elsewhere.
    pub fn inverse_weight(w: &WeightSpec, max_n: usize, grid: &Grid) -> Self {
        let samples = grid.sample(|x| {
            for (r, l) in w.rings.iter().zip(&w.levels) {
                if l.n <= max_n && r.set.contains(x) {
                    return 1.0 / l.mu_n;
                }
            }
            0.0
        });
        Target { samples }
    }

    pub fn weighted_norm(&self, mu: &[f64], grid: &Grid) -> Result<f64> {
        let zeros = vec![0.0; self.samples.len()];
        weighted_l1_distance(&self.samples, &zeros, mu, grid)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmissionKind {
    Block,
    Filler,
}

/// One emitted Hermitian pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Emission {
    pub k: u64,
    pub re: f64,
    pub im: f64,
    pub kind: EmissionKind,
    pub round: usize,
}

impl Emission {
    pub fn coefficient(&self) -> Complex64 {
        Complex64::new(self.re, self.im)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub q: usize,
    pub nu: usize,
    pub m: u64,
    pub filler_abs: f64,
    /// Weighted distance from the residual to the chosen step function.
    pub approximant_distance: f64,
    pub error: f64,
    pub bound: f64,
    pub tol: f64,
    /// Worst weighted mass of a partial block sum at the block's band ends.
    pub block_partial_max: f64,
    pub block_partial_bound: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RearrangementState {
    pub q: usize,
    pub used: BTreeSet<u64>,
    pub chosen_nu: Vec<usize>,
    pub chosen_m: Vec<u64>,
    pub partial_sum: Vec<f64>,
    pub error_curve: Vec<f64>,
    pub rounds: Vec<RoundRecord>,
    pub emitted: Vec<Emission>,
}

impl RearrangementState {
    pub fn new(grid: &Grid) -> Self {
        RearrangementState {
            q: 0,
            used: BTreeSet::new(),
            chosen_nu: Vec::new(),
            chosen_m: Vec::new(),
            partial_sum: vec![0.0; grid.len()],
            error_curve: Vec::new(),
            rounds: Vec::new(),
            emitted: Vec::new(),
        }
    }

    /// Positive frequencies below the largest emitted one that are still unused.
    pub fn unemitted_below_max(&self) -> u64 {
        match self.used.last() {
            Some(&top) => top - self.used.len() as u64,
            None => 0,
        }
    }
}

/// The emission order of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutedSeries {
    pub order: Vec<Emission>,
}

impl PermutedSeries {
    /// Checks injectivity and that each entry is the series' coefficient.
    pub fn check_against(&self, series: &UniversalSeries) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.order {
            if !seen.insert(e.k) {
                return Err(Error::invariant(format!("frequency {} emitted twice", e.k)));
            }
            if e.k == 0 || e.k >= series.end() {
                return Err(Error::invariant(format!("frequency {} is outside the series", e.k)));
            }
            if series.coefficient(e.k as i64) != e.coefficient() {
                return Err(Error::invariant(format!(
                    "emitted coefficient at {} differs from the series",
                    e.k
                )));
            }
        }
        Ok(())
    }
}

/// Weighted distance after round `q` must stay below this.
pub fn round_bound(q: usize, filler_abs: f64) -> f64 {
    2.0 * 4f64.powi(-(q as i32)) + TWO_PI * filler_abs
}

/// Smallest admissible index `ν` whose step function is within `4^{-q}`
/// of the residual. Admissible means above the previous `ν`, above the
/// previous filler frequency, and above `n0 + 1`.
pub fn pick_approximant(
    state: &RearrangementState,
    target: &Target,
    series: &UniversalSeries,
    w: &WeightSpec,
    mu: &[f64],
    grid: &Grid,
) -> Result<(usize, f64)> {
    let q = state.q + 1;
    let floor = state
        .chosen_nu
        .last()
        .map_or(0, |&v| v)
        .max(state.chosen_m.last().map_or(0, |&m| m as usize))
        .max(w.n0 + 1);
    let residual: Vec<f64> = target
        .samples
        .iter()
        .zip(&state.partial_sum)
        .map(|(t, p)| t - p)
        .collect();
    let goal = 4f64.powi(-(q as i32));
    for s in floor + 1..=series.depth() {
        let f = &series.block(s).expect("within depth").f;
        let d = weighted_l1_distance(&residual, &f.sample(grid), mu, grid)?;
        if d < goal {
            return Ok((s, d));
        }
    }
    Err(Error::DepthExhausted {
        q,
        depth: series.depth(),
    })
}

/// Smallest positive frequency not emitted yet.
pub fn pick_filler_index(state: &RearrangementState) -> u64 {
    let mut m = 1;
    for &k in state.used.range(1..) {
        if k != m {
            break;
        }
        m += 1;
    }
    m
}

fn weighted_abs(values: &[f64], mu: &[f64], grid: &Grid) -> Result<f64> {
    let zeros = vec![0.0; values.len()];
    weighted_l1_distance(values, &zeros, mu, grid)
}

/// One round: block `ν_q`, then filler `m_q`; checks the round bound.
pub fn rearrange_step(
    state: &mut RearrangementState,
    target: &Target,
    series: &UniversalSeries,
    w: &WeightSpec,
    mu: &[f64],
    grid: &Grid,
) -> Result<()> {
    let q = state.q + 1;
    let (nu, dist) = pick_approximant(state, target, series, w, mu, grid)?;
    let block = series.block(nu).expect("picked within depth");

    // Mid-block partial sums are watched at band ends.
    let mut block_partial_max: f64 = 0.0;
    for p in crate::universal::band_ends(block) {
        let v = eval_partial_sum(&block.bands, p - 1, grid)?;
        block_partial_max = block_partial_max.max(weighted_abs(&v, mu, grid)?);
    }
    let prev_filler = state.rounds.last().map_or(0.0, |r| r.filler_abs);
    let block_partial_bound = 10.0 * 4f64.powi(-(q as i32)) + TWO_PI * prev_filler;

    let mut fresh = Vec::new();
    for k in block.lo..block.hi {
        if state.used.contains(&k) {
            return Err(Error::invariant(format!("round {q}: block {nu} reuses frequency {k}")));
        }
        let c = series.coefficient(k as i64);
        fresh.push(Emission {
            k,
            re: c.re,
            im: c.im,
            kind: EmissionKind::Block,
            round: q,
        });
    }
    for e in &fresh {
        state.used.insert(e.k);
    }
    state.emitted.extend(fresh);
    let block_sum = eval_partial_sum(&block.bands, u64::MAX, grid)?;

    let m = pick_filler_index(state);
    if m >= series.end() {
        return Err(Error::DepthExhausted {
            q,
            depth: series.depth(),
        });
    }
    let c = series.coefficient(m as i64);
    let filler = if c.norm_sqr() > 0.0 {
        eval_partial_sum(&[CoeffBlock::new(0, m, vec![c])?], m, grid)?
    } else {
        vec![0.0; grid.len()]
    };
    state.used.insert(m);
    state.emitted.push(Emission {
        k: m,
        re: c.re,
        im: c.im,
        kind: EmissionKind::Filler,
        round: q,
    });

    for ((p, b), f) in state.partial_sum.iter_mut().zip(&block_sum).zip(&filler) {
        *p += b + f;
    }
    let error = weighted_l1_distance(&state.partial_sum, &target.samples, mu, grid)?;
    let tol = quadrature_tolerance(&target.samples, grid).max(quadrature_tolerance(&state.partial_sum, grid));
    let bound = round_bound(q, c.norm());
    state.q = q;
    state.chosen_nu.push(nu);
    state.chosen_m.push(m);
    state.error_curve.push(error);
    state.rounds.push(RoundRecord {
        q,
        nu,
        m,
        filler_abs: c.norm(),
        approximant_distance: dist,
        error,
        bound,
        tol,
        block_partial_max,
        block_partial_bound,
    });
    if !(error < bound + tol) {
        return Err(Error::BoundViolated { q, error, bound, tol });
    }
    if !(block_partial_max < block_partial_bound + tol) {
        return Err(Error::invariant(format!(
            "round {q}: partial block sum mass {block_partial_max:.3e} exceeds {block_partial_bound:.3e}"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub permuted: PermutedSeries,
    pub state: RearrangementState,
}

impl RunOutput {
    pub fn final_error(&self) -> Option<f64> {
        self.state.error_curve.last().copied()
    }
}

/// Runs rounds until the weighted error drops below `tol` or `max_q`
/// rounds are done. At least one round always runs.
pub fn rearrange_run(
    target: &Target,
    series: &UniversalSeries,
    w: &WeightSpec,
    grid: &Grid,
    tol: f64,
    max_q: usize,
) -> Result<RunOutput> {
    if max_q == 0 {
        return Err(Error::input("max_q must be at least 1"));
    }
    if !(tol > 0.0) {
        return Err(Error::input(format!("tolerance must be positive, got {tol}")));
    }
    let mu = weight_samples(w, grid);
    let mut state = RearrangementState::new(grid);
    while state.q < max_q {
        rearrange_step(&mut state, target, series, w, &mu, grid)?;
        if state.error_curve.last().is_some_and(|&e| e < tol) {
            break;
        }
    }
    Ok(RunOutput {
        permuted: PermutedSeries {
            order: state.emitted.clone(),
        },
        state,
    })
}

/// Like [`rearrange_run`], but deepens the series by one block and
/// rebuilds the weight whenever the built depth runs out. The weight
/// changes with the depth, so each retry starts from scratch. The target
/// is rebuilt from the current weight.
#[allow(clippy::too_many_arguments)]
pub fn rearrange_with_deepening(
    target: impl Fn(&WeightSpec) -> Result<Target>,
    series: &mut UniversalSeries,
    epsilon: f64,
    grid: &Grid,
    cond4: &Cond4Options,
    tol: f64,
    max_q: usize,
    max_depth: usize,
) -> Result<(RunOutput, WeightSpec)> {
    let n0 = crate::universal::weight_cutoff(epsilon)?;
    if series.depth() <= n0 + 1 {
        series.extend_to(n0 + 2, grid, cond4)?;
    }
    loop {
        let w = build_weight(series, epsilon)?;
        let t = target(&w)?;
        match rearrange_run(&t, series, &w, grid, tol, max_q) {
            Err(Error::DepthExhausted { .. }) if series.depth() < max_depth => {
                series.extend_to(series.depth() + 1, grid, cond4)?;
            }
            other => return other.map(|out| (out, w)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::step::StepFunction;
    use crate::trig::Modulus;
    use crate::universal::FunctionSource;

    fn grid() -> Grid {
        Grid::new(12).unwrap()
    }

    /// Zero step functions whose one-frequency blocks get small synthetic
    /// coefficients, so block `s` owns frequency `s`.
    fn synthetic(depth: usize, scale: f64) -> UniversalSeries {
        let source = FunctionSource::Explicit {
            functions: vec![StepFunction::zero(); depth],
        };
        let mut s = UniversalSeries::new(source, Modulus::Power { alpha: 1.0 }).unwrap();
        s.extend_to(depth, &grid(), &Cond4Options::default()).unwrap();
        for b in s.blocks.iter_mut() {
            let c = Complex64::new(scale * 0.5f64.powi(b.s as i32), -scale * 0.25f64.powi(b.s as i32));
            b.bands = vec![CoeffBlock::new(b.s, b.lo, vec![c]).unwrap()];
        }
        s
    }

    #[test]
    fn filler_is_minimal_gap() {
        let mut st = RearrangementState::new(&grid());
        assert_eq!(pick_filler_index(&st), 1);
        st.used.extend([1, 2, 3, 4, 5, 7]);
        assert_eq!(pick_filler_index(&st), 6);
        st.used.insert(6);
        assert_eq!(pick_filler_index(&st), 8);
        assert_eq!(st.unemitted_below_max(), 0);
    }

    #[test]
    fn zero_target_zero_series_stays_exact() {
        let g = grid();
        let s = synthetic(8, 0.0);
        let w = build_weight(&s, 0.6).unwrap();
        assert_eq!(w.n0, 1);
        let out = rearrange_run(&Target::zero(&g), &s, &w, &g, 1e-3, 3).unwrap();
        assert_eq!(out.state.error_curve, vec![0.0]);
        assert_eq!(out.state.chosen_nu, vec![3]);
        assert_eq!(out.state.chosen_m, vec![1]);
    }

    #[test]
    fn rounds_follow_admissibility_rules() {
        let g = grid();
        let s = synthetic(12, 1e-4);
        let w = build_weight(&s, 0.6).unwrap();
        let out = rearrange_run(&Target::zero(&g), &s, &w, &g, 1e-12, 4).unwrap();
        let st = &out.state;
        assert_eq!(st.chosen_nu, vec![3, 4, 5, 7]);
        assert_eq!(st.chosen_m, vec![1, 2, 6, 8]);
        for q in 1..st.q {
            assert!(st.chosen_nu[q] > st.chosen_nu[q - 1]);
            assert!(st.chosen_nu[q] as u64 > st.chosen_m[q - 1]);
        }
        for r in &st.rounds {
            assert!(r.error < r.bound + r.tol, "{r:?}");
        }
        out.permuted.check_against(&s).unwrap();
        // Each round adds the block's band plus one filler.
        assert_eq!(out.permuted.order.len(), 8);
        assert_eq!(st.unemitted_below_max(), 0);
    }

    #[test]
    fn partial_sum_matches_emitted_terms() {
        let g = grid();
        let s = synthetic(12, 1e-4);
        let w = build_weight(&s, 0.6).unwrap();
        let out = rearrange_run(&Target::zero(&g), &s, &w, &g, 1e-12, 4).unwrap();
        for (j, x) in [0usize, 77, 1000, 4000].map(|j| (j, g.x(j))) {
            let direct: f64 = out
                .permuted
                .order
                .iter()
                .map(|e| 2.0 * (e.coefficient() * Complex64::from_polar(1.0, e.k as f64 * x)).re)
                .sum();
            assert!((direct - out.state.partial_sum[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn shallow_series_exhausts() {
        let g = grid();
        let s = synthetic(3, 0.0);
        let w = build_weight(&s, 0.6).unwrap();
        let mu = weight_samples(&w, &g);
        let t = Target::zero(&g);
        let mut st = RearrangementState::new(&g);
        rearrange_step(&mut st, &t, &s, &w, &mu, &g).unwrap();
        let err = rearrange_step(&mut st, &t, &s, &w, &mu, &g).unwrap_err();
        assert!(matches!(err, Error::DepthExhausted { q: 2, depth: 3 }), "{err}");
    }

    #[test]
    fn unreachable_target_exhausts() {
        let g = grid();
        let s = synthetic(6, 0.0);
        let w = build_weight(&s, 0.6).unwrap();
        let err = rearrange_run(&Target::sign(&g), &s, &w, &g, 0.05, 2).unwrap_err();
        assert!(matches!(err, Error::DepthExhausted { q: 1, .. }));
    }

    #[test]
    fn deepening_extends_on_demand() {
        let g = grid();
        let source = FunctionSource::Explicit {
            functions: vec![StepFunction::zero(); 10],
        };
        let mut s = UniversalSeries::new(source, Modulus::Power { alpha: 1.0 }).unwrap();
        let (out, w) = rearrange_with_deepening(
            |w| Ok(Target::inverse_weight(w, 6, &g)),
            &mut s,
            0.6,
            &g,
            &Cond4Options::default(),
            1e-12,
            3,
            10,
        )
        .unwrap();
        // Zero blocks leave E full, so the inverse-weight target vanishes.
        assert!(w.rings.iter().all(|r| r.set.is_empty()));
        assert_eq!(out.state.q, 1);
        assert_eq!(out.final_error(), Some(0.0));
        assert!(s.depth() >= 3);
    }

    #[test]
    fn sign_target_samples() {
        let g = grid();
        let t = Target::sign(&g);
        assert_eq!(t.samples[0], 1.0);
        assert_eq!(t.samples[g.len() / 2], 0.0);
        assert_eq!(t.samples[g.len() - 1], -1.0);
        let mu = vec![1.0; g.len()];
        assert!((t.weighted_norm(&mu, &g).unwrap() - TWO_PI).abs() < 1e-2);
    }

    #[test]
    fn target_shape_checked() {
        assert!(Target::new(vec![0.0; 3], &grid()).is_err());
        assert!(Target::new(vec![f64::NAN; 4096], &grid()).is_err());
    }
}
