//! Finite-precision measure theory on the circle `[0, 2π)`.
//!
//! Every set handled by the crate is a finite disjoint union of intervals,
//! so measures, intersections and differences are exact endpoint
//! arithmetic. Integrals of sampled functions run on a power-of-two
//! uniform [`Grid`] that is shared with the fast transform.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TWO_PI: f64 = 2.0 * PI;

/// Endpoints within this distance of `0` or `2π` are snapped onto the domain.
const DOMAIN_SLACK: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !lo.is_finite() || !hi.is_finite() {
            return Err(Error::input(format!("interval [{lo}, {hi}] is not finite")));
        }
        if lo > hi {
            return Err(Error::input(format!("interval [{lo}, {hi}] has lo > hi")));
        }
        if lo < -DOMAIN_SLACK || hi > TWO_PI + DOMAIN_SLACK {
            return Err(Error::input(format!(
                "interval [{lo}, {hi}] leaves the domain [0, 2π]"
            )));
        }
        Ok(Interval {
            lo: lo.clamp(0.0, TWO_PI),
            hi: hi.clamp(0.0, TWO_PI),
        })
    }

    pub fn full() -> Self {
        Interval { lo: 0.0, hi: TWO_PI }
    }

    pub fn len(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn is_empty(&self) -> bool {
        self.hi <= self.lo
    }

    /// Half-open membership `lo <= x < hi`.
    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x < self.hi
    }
}

/// A finite union of disjoint intervals, sorted by left endpoint.
///
/// Overlapping or touching pieces are merged on construction, so two
/// stored pieces are always separated by a gap of positive length.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[f64; 2]>", into = "Vec<[f64; 2]>")]
pub struct IntervalSet {
    pieces: Vec<Interval>,
}

impl TryFrom<Vec<[f64; 2]>> for IntervalSet {
    type Error = Error;

    fn try_from(raw: Vec<[f64; 2]>) -> Result<Self> {
        let pieces = raw
            .into_iter()
            .map(|[lo, hi]| Interval::new(lo, hi))
            .collect::<Result<Vec<_>>>()?;
        Ok(IntervalSet::from_intervals(pieces))
    }
}

impl From<IntervalSet> for Vec<[f64; 2]> {
    fn from(set: IntervalSet) -> Self {
        set.pieces.iter().map(|p| [p.lo, p.hi]).collect()
    }
}

impl IntervalSet {
    pub fn empty() -> Self {
        IntervalSet { pieces: Vec::new() }
    }

    pub fn full() -> Self {
        IntervalSet {
            pieces: vec![Interval::full()],
        }
    }

    pub fn from_intervals(intervals: impl IntoIterator<Item = Interval>) -> Self {
        let mut raw: Vec<Interval> = intervals.into_iter().filter(|p| !p.is_empty()).collect();
        raw.sort_by(|a, b| a.lo.total_cmp(&b.lo));
        let mut pieces: Vec<Interval> = Vec::with_capacity(raw.len());
        for p in raw {
            match pieces.last_mut() {
                Some(last) if p.lo <= last.hi => last.hi = last.hi.max(p.hi),
                _ => pieces.push(p),
            }
        }
        IntervalSet { pieces }
    }

    /// Builds a set from raw `(lo, hi)` pairs, validating each.
    pub fn from_pairs(pairs: &[(f64, f64)]) -> Result<Self> {
        let pieces = pairs
            .iter()
            .map(|&(lo, hi)| Interval::new(lo, hi))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_intervals(pieces))
    }

    pub fn pieces(&self) -> &[Interval] {
        &self.pieces
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn measure(&self) -> f64 {
        self.pieces.iter().map(Interval::len).sum()
    }

    pub fn contains(&self, x: f64) -> bool {
        let idx = self.pieces.partition_point(|p| p.lo <= x);
        idx > 0 && self.pieces[idx - 1].contains(x)
    }

    pub fn intersect(&self, other: &IntervalSet) -> IntervalSet {
        let (a, b) = (&self.pieces, &other.pieces);
        let mut out = Vec::new();
        let (mut i, mut j) = (0, 0);
        while i < a.len() && j < b.len() {
            let lo = a[i].lo.max(b[j].lo);
            let hi = a[i].hi.min(b[j].hi);
            if lo < hi {
                out.push(Interval { lo, hi });
            }
            if a[i].hi < b[j].hi {
                i += 1;
            } else {
                j += 1;
            }
        }
        IntervalSet::from_intervals(out)
    }

    pub fn union(&self, other: &IntervalSet) -> IntervalSet {
        IntervalSet::from_intervals(self.pieces.iter().chain(other.pieces.iter()).copied())
    }

    /// `universe \ self`.
    pub fn complement_within(&self, universe: &IntervalSet) -> IntervalSet {
        let mut out = Vec::new();
        let mut j = 0;
        for u in &universe.pieces {
            let mut cur = u.lo;
            while j < self.pieces.len() && self.pieces[j].hi <= u.lo {
                j += 1;
            }
            let mut k = j;
            while k < self.pieces.len() && self.pieces[k].lo < u.hi {
                let s = self.pieces[k];
                if s.lo > cur {
                    out.push(Interval { lo: cur, hi: s.lo });
                }
                cur = cur.max(s.hi);
                if cur >= u.hi {
                    break;
                }
                k += 1;
            }
            if cur < u.hi {
                out.push(Interval { lo: cur, hi: u.hi });
            }
        }
        IntervalSet::from_intervals(out)
    }

    /// `[0, 2π] \ self`.
    pub fn complement(&self) -> IntervalSet {
        self.complement_within(&IntervalSet::full())
    }

    /// Subset test up to `tol` of uncovered measure.
    pub fn is_subset_of(&self, other: &IntervalSet, tol: f64) -> bool {
        self.complement_within_measure(other) <= tol
    }

    fn complement_within_measure(&self, other: &IntervalSet) -> f64 {
        other.complement_within(&IntervalSet::full()).intersect(self).measure()
    }
}

/// Uniform grid of `2^log2_points` samples `x_j = 2πj / 2^log2_points`.
#[derive(Clone)]
pub struct Grid {
    log2_points: u32,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Grid")
            .field("log2_points", &self.log2_points)
            .finish()
    }
}

impl PartialEq for Grid {
    fn eq(&self, other: &Self) -> bool {
        self.log2_points == other.log2_points
    }
}

impl Grid {
    pub const MIN_LOG2: u32 = 10;
    pub const MAX_LOG2: u32 = 24;
    pub const DEFAULT_LOG2: u32 = 18;

    pub fn new(log2_points: u32) -> Result<Self> {
        if !(Self::MIN_LOG2..=Self::MAX_LOG2).contains(&log2_points) {
            return Err(Error::input(format!(
                "grid log2_points must lie in {}..={}, got {log2_points}",
                Self::MIN_LOG2,
                Self::MAX_LOG2
            )));
        }
        let n = 1usize << log2_points;
        let mut planner = FftPlanner::new();
        Ok(Grid {
            log2_points,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        })
    }

    pub fn log2_points(&self) -> u32 {
        self.log2_points
    }

    pub fn len(&self) -> usize {
        1usize << self.log2_points
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn cell(&self) -> f64 {
        TWO_PI / self.len() as f64
    }

    pub fn x(&self, j: usize) -> f64 {
        j as f64 * self.cell()
    }

    pub fn abscissae(&self) -> Vec<f64> {
        (0..self.len()).map(|j| self.x(j)).collect()
    }

    pub fn sample(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        (0..self.len()).map(|j| f(self.x(j))).collect()
    }

    /// Highest frequency evaluated with at least 16 samples per period.
    pub fn max_resolved_freq(&self) -> u64 {
        (self.len() / 16) as u64
    }

    pub(crate) fn fft_forward(&self, buf: &mut [Complex64]) {
        self.forward.process(buf);
    }

    pub(crate) fn fft_inverse(&self, buf: &mut [Complex64]) {
        self.inverse.process(buf);
    }

    pub(crate) fn check_len(&self, values: &[f64]) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::input(format!(
                "sample count {} does not match grid size {}",
                values.len(),
                self.len()
            )));
        }
        Ok(())
    }

    /// Cell index containing `x` (half-open cells, clamped to the last cell at `2π`).
    fn cell_index(&self, x: f64) -> usize {
        ((x / self.cell()).floor().max(0.0) as usize).min(self.len() - 1)
    }
}

/// A piecewise-constant function on `[0, 2π)` with explicit breakpoints.
///
/// Used for step functions and modulated blocks whose jumps do not fall on
/// grid nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct PiecewiseConstant {
    breaks: Vec<f64>,
    values: Vec<f64>,
}

impl PiecewiseConstant {
    pub fn new(breaks: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if breaks.len() != values.len() + 1 || values.is_empty() {
            return Err(Error::input("breakpoints must number values + 1"));
        }
        if breaks[0] != 0.0 || (breaks[breaks.len() - 1] - TWO_PI).abs() > DOMAIN_SLACK {
            return Err(Error::input("breakpoints must span [0, 2π]"));
        }
        if breaks.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::input("breakpoints must be nondecreasing"));
        }
        Ok(PiecewiseConstant { breaks, values })
    }

    pub fn constant(c: f64) -> Self {
        PiecewiseConstant {
            breaks: vec![0.0, TWO_PI],
            values: vec![c],
        }
    }

    pub fn breaks(&self) -> &[f64] {
        &self.breaks
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn locate(&self, x: f64) -> usize {
        let idx = self.breaks.partition_point(|&b| b <= x);
        idx.saturating_sub(1).min(self.values.len() - 1)
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.values[self.locate(x)]
    }

    pub fn sample(&self, grid: &Grid) -> Vec<f64> {
        grid.sample(|x| self.eval(x))
    }

    /// `(1/2π) ∫ f(t) e^{-ikt} dt`, exact for piecewise-constant data.
    pub fn fourier_coefficient(&self, k: i64) -> Complex64 {
        let mut acc = Complex64::new(0.0, 0.0);
        for (i, &v) in self.values.iter().enumerate() {
            let (a, b) = (self.breaks[i], self.breaks[i + 1]);
            if v == 0.0 || b <= a {
                continue;
            }
            acc += v * exp_integral(k, a, b);
        }
        acc / TWO_PI
    }

    /// `∫_S |f|`, exact.
    pub fn integrate_abs_on(&self, set: &IntervalSet) -> f64 {
        let mut acc = 0.0;
        for p in set.pieces() {
            let mut i = self.locate(p.lo);
            loop {
                let lo = p.lo.max(self.breaks[i]);
                let hi = p.hi.min(self.breaks[i + 1]);
                if hi > lo {
                    acc += (hi - lo) * self.values[i].abs();
                }
                if self.breaks[i + 1] >= p.hi || i + 1 == self.values.len() {
                    break;
                }
                i += 1;
            }
        }
        acc
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// `∫_a^b e^{-ikx} dx`.
pub(crate) fn exp_integral(k: i64, a: f64, b: f64) -> Complex64 {
    if k == 0 {
        return Complex64::new(b - a, 0.0);
    }
    let kf = k as f64;
    let ea = Complex64::from_polar(1.0, -kf * a);
    let eb = Complex64::from_polar(1.0, -kf * b);
    (ea - eb) / Complex64::new(0.0, kf)
}

/// Integral over the set of the piecewise-linear interpolant of `values`.
///
/// On the full circle this is the periodic trapezoid rule, i.e. the Riemann
/// sum with cell weight `2π / 2^log2_points`.
pub fn integrate_on_set(values: &[f64], set: &IntervalSet, grid: &Grid) -> Result<f64> {
    grid.check_len(values)?;
    let mut acc = 0.0;
    walk_linear(values, grid, None, set, |len, l0, l1, _| {
        acc += 0.5 * len * (l0 + l1);
    });
    Ok(acc)
}

/// `∫_S |L(x) - c(x)| dx` where `L` interpolates `values` linearly and `c`
/// is piecewise constant. Breakpoints of `c` and `S` are honoured exactly.
pub fn integrate_abs_diff(
    values: &[f64],
    grid: &Grid,
    subtrahend: &PiecewiseConstant,
    set: &IntervalSet,
) -> Result<f64> {
    grid.check_len(values)?;
    let mut acc = 0.0;
    walk_linear(values, grid, Some(subtrahend), set, |len, l0, l1, c| {
        acc += abs_linear(len, l0 - c, l1 - c);
    });
    Ok(acc)
}

/// `∫_S (|L(x)| - |c(x)|)_+ dx`: the largest possible value of
/// `∫_e |L| - ∫_e |c|` over measurable `e ⊂ S`.
pub fn integrate_abs_excess(
    values: &[f64],
    grid: &Grid,
    reference: &PiecewiseConstant,
    set: &IntervalSet,
) -> Result<f64> {
    grid.check_len(values)?;
    let mut acc = 0.0;
    walk_linear(values, grid, Some(reference), set, |len, l0, l1, c| {
        let c = c.abs();
        if l0 * l1 < 0.0 {
            let t = l0 / (l0 - l1);
            acc += positive_linear(len * t, l0.abs() - c, -c);
            acc += positive_linear(len * (1.0 - t), -c, l1.abs() - c);
        } else {
            acc += positive_linear(len, l0.abs() - c, l1.abs() - c);
        }
    });
    Ok(acc)
}

/// Visits every sub-interval of `set` on which the linear interpolant of
/// `values` is a single linear piece and `pc` is constant.
fn walk_linear(
    values: &[f64],
    grid: &Grid,
    pc: Option<&PiecewiseConstant>,
    set: &IntervalSet,
    mut visit: impl FnMut(f64, f64, f64, f64),
) {
    let n = grid.len();
    let h = grid.cell();
    let lin = |j: usize, x: f64| {
        let v0 = values[j];
        let v1 = values[(j + 1) % n];
        v0 + (v1 - v0) * (x - j as f64 * h) / h
    };
    for piece in set.pieces() {
        let (a, b) = (piece.lo, piece.hi);
        let mut j = grid.cell_index(a);
        let mut k = pc.map_or(0, |p| p.locate(a));
        let mut x = a;
        while x < b {
            let cell_end = if j + 1 == n { TWO_PI } else { (j + 1) as f64 * h };
            let pc_end = pc.map_or(f64::INFINITY, |p| p.breaks[k + 1]);
            let next = b.min(cell_end).min(pc_end);
            if next > x {
                let c = pc.map_or(0.0, |p| p.values[k]);
                visit(next - x, lin(j, x), lin(j, next), c);
            }
            if next >= b {
                break;
            }
            let mut advanced = false;
            if next >= cell_end && j + 1 < n {
                j += 1;
                advanced = true;
            }
            if let Some(p) = pc {
                if next >= pc_end && k + 1 < p.values.len() {
                    k += 1;
                    advanced = true;
                }
            }
            if !advanced && next <= x {
                break;
            }
            x = next;
        }
    }
}

/// `∫ |l|` for `l` linear from `a` to `b` over an interval of length `len`.
fn abs_linear(len: f64, a: f64, b: f64) -> f64 {
    if a * b >= 0.0 {
        0.5 * len * (a.abs() + b.abs())
    } else {
        0.5 * len * (a * a + b * b) / (a.abs() + b.abs())
    }
}

/// `∫ max(l, 0)` for `l` linear from `a` to `b`.
fn positive_linear(len: f64, a: f64, b: f64) -> f64 {
    if len <= 0.0 {
        return 0.0;
    }
    match (a > 0.0, b > 0.0) {
        (true, true) => 0.5 * len * (a + b),
        (false, false) => 0.0,
        (true, false) => 0.5 * len * a * a / (a - b),
        (false, true) => 0.5 * len * b * b / (b - a),
    }
}

/// Prefix sums of `∫ |L|` cell by cell, answering `∫_e |L|` for many sets
/// `e` in time proportional to the number of pieces.
pub struct AbsPrefix<'a> {
    values: &'a [f64],
    grid: &'a Grid,
    prefix: Vec<f64>,
}

impl<'a> AbsPrefix<'a> {
    pub fn new(values: &'a [f64], grid: &'a Grid) -> Result<Self> {
        grid.check_len(values)?;
        let n = grid.len();
        let h = grid.cell();
        let mut prefix = Vec::with_capacity(n + 1);
        let mut acc = 0.0;
        prefix.push(acc);
        for j in 0..n {
            acc += abs_linear(h, values[j], values[(j + 1) % n]);
            prefix.push(acc);
        }
        Ok(AbsPrefix {
            values,
            grid,
            prefix,
        })
    }

    fn partial(&self, j: usize, x0: f64, x1: f64) -> f64 {
        let n = self.grid.len();
        let h = self.grid.cell();
        let v0 = self.values[j];
        let v1 = self.values[(j + 1) % n];
        let lin = |x: f64| v0 + (v1 - v0) * (x - j as f64 * h) / h;
        abs_linear(x1 - x0, lin(x0), lin(x1))
    }

    pub fn integrate(&self, set: &IntervalSet) -> f64 {
        let h = self.grid.cell();
        let mut acc = 0.0;
        for p in set.pieces() {
            let ja = self.grid.cell_index(p.lo);
            let jb = self.grid.cell_index(p.hi);
            if ja == jb {
                acc += self.partial(ja, p.lo, p.hi);
            } else {
                acc += self.partial(ja, p.lo, (ja + 1) as f64 * h);
                acc += self.prefix[jb] - self.prefix[ja + 1];
                acc += self.partial(jb, jb as f64 * h, p.hi);
            }
        }
        acc
    }
}

/// Finite witness family of measurable subsets of `e_set`.
///
/// The first two entries are `e_set` itself and the empty set; the rest are
/// unions of at most `max_pieces` random sub-intervals of pieces of `e_set`.
pub fn sample_subsets(
    e_set: &IntervalSet,
    count: usize,
    max_pieces: usize,
    seed: u64,
) -> Result<Vec<IntervalSet>> {
    if count == 0 || max_pieces == 0 {
        return Err(Error::input("count and max_pieces must be positive"));
    }
    let mut out = vec![e_set.clone(), IntervalSet::empty()];
    out.truncate(count);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pieces = e_set.pieces();
    while out.len() < count {
        if pieces.is_empty() {
            out.push(IntervalSet::empty());
            continue;
        }
        let n = rng.gen_range(1..=max_pieces);
        let chosen = (0..n).map(|_| {
            let p = pieces[rng.gen_range(0..pieces.len())];
            let u: f64 = rng.gen();
            let v: f64 = rng.gen();
            let (lo, hi) = (u.min(v), u.max(v));
            Interval {
                lo: p.lo + lo * p.len(),
                hi: p.lo + hi * p.len(),
            }
        });
        out.push(IntervalSet::from_intervals(chosen));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn set(pairs: &[(f64, f64)]) -> IntervalSet {
        IntervalSet::from_pairs(pairs).unwrap()
    }

    #[test]
    fn measure_examples() {
        assert_eq!(set(&[(0.0, 1.0), (0.5, 2.0)]).measure(), 2.0);
        assert_eq!(IntervalSet::empty().measure(), 0.0);
        assert_eq!(IntervalSet::full().measure(), TWO_PI);
    }

    #[test]
    fn intersect_examples() {
        assert_eq!(set(&[(0.0, 1.0)]).intersect(&set(&[(0.5, 2.0)])), set(&[(0.5, 1.0)]));
        let s = set(&[(0.1, 0.4), (1.0, 3.0)]);
        assert_eq!(s.intersect(&IntervalSet::full()), s);
        assert!(set(&[(0.0, 1.0)]).intersect(&set(&[(1.5, 2.0)])).is_empty());
    }

    #[test]
    fn complement_examples() {
        let upper = set(&[(0.0, PI)]).complement_within(&IntervalSet::full());
        assert_eq!(upper, set(&[(PI, TWO_PI)]));
        let s = set(&[(0.2, 0.3), (1.0, 2.0)]);
        assert!(s.complement_within(&s).is_empty());
        let u = set(&[(0.0, 2.0)]);
        assert_eq!(IntervalSet::empty().complement_within(&u), u);
    }

    #[test]
    fn complement_spanning_universe_pieces() {
        let s = set(&[(0.5, 2.5)]);
        let u = set(&[(0.0, 1.0), (2.0, 3.0)]);
        assert_eq!(s.complement_within(&u), set(&[(0.0, 0.5), (2.5, 3.0)]));
    }

    #[test]
    fn rejects_out_of_domain() {
        assert!(Interval::new(-0.5, 1.0).is_err());
        assert!(Interval::new(2.0, 1.0).is_err());
        assert!(Interval::new(0.0, 7.0).is_err());
    }

    #[test]
    fn membership_is_half_open() {
        let s = set(&[(0.0, 1.0), (2.0, 3.0)]);
        assert!(s.contains(0.0));
        assert!(!s.contains(1.0));
        assert!(s.contains(2.5));
        assert!(!s.contains(3.0));
    }

    #[test]
    fn integrate_sin_on_half_circle() {
        let g = Grid::new(20).unwrap();
        let v = g.sample(f64::sin);
        let got = integrate_on_set(&v, &set(&[(0.0, PI)]), &g).unwrap();
        assert_abs_diff_eq!(got, 2.0, epsilon = 1e-6);
    }

    #[test]
    fn integrate_ones_gives_measure() {
        let g = Grid::new(12).unwrap();
        let ones = vec![1.0; g.len()];
        let s = set(&[(0.123, 0.777), (2.0, 4.5), (5.1, 6.2)]);
        let got = integrate_on_set(&ones, &s, &g).unwrap();
        assert_abs_diff_eq!(got, s.measure(), epsilon = g.cell() * 3.0);
    }

    #[test]
    fn spike_profile_has_zero_integral() {
        // ε = 1/2: value 1 - 4 = -3 on [π/4, 3π/4); the lengths cancel exactly.
        let g = Grid::new(16).unwrap();
        let v = g.sample(|x| if (PI / 4.0..3.0 * PI / 4.0).contains(&x) { -3.0 } else { 1.0 });
        let got = integrate_on_set(&v, &IntervalSet::full(), &g).unwrap();
        assert_abs_diff_eq!(got, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn sample_count_mismatch_is_input_error() {
        let g = Grid::new(10).unwrap();
        assert!(matches!(
            integrate_on_set(&[1.0; 5], &IntervalSet::full(), &g),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn quadrature_converges_at_least_linearly() {
        for f in [f64::sin as fn(f64) -> f64, f64::cos] {
            let s = set(&[(0.3, 1.7), (2.9, 5.05)]);
            let exact: f64 = if f(0.0) == 0.0 {
                (-(1.7f64).cos() + 0.3f64.cos()) + (-(5.05f64).cos() + 2.9f64.cos())
            } else {
                (1.7f64.sin() - 0.3f64.sin()) + (5.05f64.sin() - 2.9f64.sin())
            };
            let mut prev = f64::INFINITY;
            for log2 in 10..15 {
                let g = Grid::new(log2).unwrap();
                let err = (integrate_on_set(&g.sample(f), &s, &g).unwrap() - exact).abs();
                assert!(err <= prev / 2.0, "log2={log2}: {err} vs {prev}");
                prev = err;
            }
        }
    }

    #[test]
    fn abs_diff_handles_offgrid_jumps_exactly() {
        // |0 - c| with c jumping off-grid: exact answer is Σ |v| · length.
        let g = Grid::new(10).unwrap();
        let pc = PiecewiseConstant::new(vec![0.0, 0.3333, 2.71, TWO_PI], vec![1.0, -2.0, 0.5]).unwrap();
        let zero = vec![0.0; g.len()];
        let got = integrate_abs_diff(&zero, &g, &pc, &IntervalSet::full()).unwrap();
        let exact = 0.3333 + 2.0 * (2.71 - 0.3333) + 0.5 * (TWO_PI - 2.71);
        assert_abs_diff_eq!(got, exact, epsilon = 1e-12);
        let sub = set(&[(0.1, 1.0)]);
        let got = integrate_abs_diff(&zero, &g, &pc, &sub).unwrap();
        assert_abs_diff_eq!(got, pc.integrate_abs_on(&sub), epsilon = 1e-12);
    }

    #[test]
    fn abs_excess_is_worst_subset_gap() {
        let g = Grid::new(12).unwrap();
        let v = g.sample(f64::sin);
        let pc = PiecewiseConstant::constant(0.5);
        let got = integrate_abs_excess(&v, &g, &pc, &IntervalSet::full()).unwrap();
        // ∫ (|sin| - 1/2)_+ = 2 ∫_{π/6}^{5π/6} (sin - 1/2) = 2 (√3 - π/3)
        let exact = 2.0 * (3f64.sqrt() - PI / 3.0);
        assert_abs_diff_eq!(got, exact, epsilon = 1e-5);
    }

    #[test]
    fn prefix_matches_walker() {
        let g = Grid::new(11).unwrap();
        let v = g.sample(|x| (3.0 * x).cos() - 0.2);
        let prefix = AbsPrefix::new(&v, &g).unwrap();
        let zero = PiecewiseConstant::constant(0.0);
        for s in [
            IntervalSet::full(),
            set(&[(0.01, 0.011)]),
            set(&[(0.5, 2.25), (3.0, TWO_PI)]),
        ] {
            let a = prefix.integrate(&s);
            let b = integrate_abs_diff(&v, &g, &zero, &s).unwrap();
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn subsets_start_with_set_and_empty() {
        let e = set(&[(0.0, 1.0), (2.0, 3.0)]);
        let two = sample_subsets(&e, 2, 3, 1).unwrap();
        assert_eq!(two, vec![e.clone(), IntervalSet::empty()]);
        let many = sample_subsets(&e, 50, 4, 42).unwrap();
        assert_eq!(many, sample_subsets(&e, 50, 4, 42).unwrap());
        for s in &many {
            assert!(s.pieces().len() <= 4 || s == &e);
            assert!(s.measure() <= e.measure());
            assert_abs_diff_eq!(s.intersect(&e).measure(), s.measure(), epsilon = 1e-15);
        }
    }

    fn arb_set() -> impl Strategy<Value = IntervalSet> {
        prop::collection::vec((0.0..TWO_PI, 0.0..1.5f64), 0..6).prop_map(|raw| {
            IntervalSet::from_intervals(raw.into_iter().map(|(lo, len)| Interval {
                lo,
                hi: (lo + len).min(TWO_PI),
            }))
        })
    }

    proptest! {
        #[test]
        fn measure_additive_on_disjoint(a in arb_set(), b in arb_set()) {
            let b_only = a.complement_within(&b);
            prop_assert!(a.intersect(&b_only).measure() < 1e-12);
            let lhs = a.union(&b_only).measure();
            prop_assert!((lhs - a.measure() - b_only.measure()).abs() < 1e-12);
        }

        #[test]
        fn intersect_with_complement_is_empty(a in arb_set(), u in arb_set()) {
            let c = a.complement_within(&u);
            prop_assert!(a.intersect(&c).is_empty());
            let expected = u.measure() - a.intersect(&u).measure();
            prop_assert!((c.measure() - expected).abs() < 1e-12);
        }

        #[test]
        fn intersect_shrinks(a in arb_set(), b in arb_set()) {
            let m = a.intersect(&b).measure();
            prop_assert!(m <= a.measure().min(b.measure()) + 1e-12);
        }

        #[test]
        fn quadrature_additive_on_disjoint(a in arb_set(), b in arb_set()) {
            let g = Grid::new(10).unwrap();
            let v = g.sample(|x| (2.0 * x).sin() + 0.3);
            let b_only = a.complement_within(&b);
            let whole = integrate_on_set(&v, &a.union(&b_only), &g).unwrap();
            let parts = integrate_on_set(&v, &a, &g).unwrap()
                + integrate_on_set(&v, &b_only, &g).unwrap();
            let pieces = (a.pieces().len() + b_only.pieces().len()) as f64;
            prop_assert!((whole - parts).abs() <= g.cell() * 1.3 * pieces.max(1.0));
        }
    }
}
