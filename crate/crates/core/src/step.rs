//! Dyadic step functions with exact rational values, and a fixed
//! enumeration of all of them.
//!
//! The enumeration order is part of the artifact contract:
//!
//! 1. index `n ≥ 1` splits uniquely as `n = 2^level · (2·code + 1)`;
//! 2. `code` is unfolded into `2^level` natural numbers by a binary tree of
//!    Cantor pairings (`code = pair(left, right)`, each half recursively),
//!    i.e. a diagonal sweep at every node of the dyadic tree;
//! 3. each natural number `r` becomes a rational: `0 ↦ 0`, and for `r ≥ 1`
//!    the `⌈r/2⌉`-th Calkin–Wilf rational, positive for odd `r` and
//!    negative for even `r`.
//!
//! Every step of this chain is a bijection, so every `(level, values)` pair
//! appears at exactly one index, and index 1 is the zero function at level 0.

use std::fmt;

use num_rational::Rational64;
use num_traits::{Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::{Grid, Interval, PiecewiseConstant, TWO_PI};

/// Deepest dyadic level a step function may use.
pub const MAX_LEVEL: u32 = 24;

/// `Δ_m^{(i)} = [2π(i-1)/2^m, 2πi/2^m]`, for `1 ≤ i ≤ 2^m`.
pub fn dyadic_interval(m: u32, i: u64) -> Result<Interval> {
    if m > MAX_LEVEL {
        return Err(Error::input(format!("dyadic level {m} exceeds {MAX_LEVEL}")));
    }
    let count = 1u64 << m;
    if i == 0 || i > count {
        return Err(Error::input(format!(
            "dyadic index {i} outside 1..={count} at level {m}"
        )));
    }
    let width = TWO_PI / count as f64;
    let hi = if i == count { TWO_PI } else { i as f64 * width };
    Interval::new((i - 1) as f64 * width, hi)
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "StepFunctionRepr", into = "StepFunctionRepr")]
pub struct StepFunction {
    level: u32,
    values: Vec<Rational64>,
    real: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct StepFunctionRepr {
    level: u32,
    values: Vec<[i64; 2]>,
}

impl TryFrom<StepFunctionRepr> for StepFunction {
    type Error = Error;

    fn try_from(repr: StepFunctionRepr) -> Result<Self> {
        let values = repr
            .values
            .into_iter()
            .map(|[num, den]| {
                if den == 0 {
                    Err(Error::input("zero denominator in step function value"))
                } else {
                    Ok(Rational64::new(num, den))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        StepFunction::new(repr.level, values)
    }
}

impl From<StepFunction> for StepFunctionRepr {
    fn from(f: StepFunction) -> Self {
        StepFunctionRepr {
            level: f.level,
            values: f.values.iter().map(|r| [*r.numer(), *r.denom()]).collect(),
        }
    }
}

impl fmt::Debug for StepFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "StepFunction(level={}, [", self.level)?;
        for (i, v) in self.values.iter().take(8).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.values.len() > 8 {
            write!(f, ", ... {} values", self.values.len())?;
        }
        write!(f, "])")
    }
}

impl StepFunction {
    pub fn new(level: u32, values: Vec<Rational64>) -> Result<Self> {
        if level > MAX_LEVEL {
            return Err(Error::input(format!("level {level} exceeds {MAX_LEVEL}")));
        }
        if values.len() != 1usize << level {
            return Err(Error::input(format!(
                "level {level} needs {} values, got {}",
                1usize << level,
                values.len()
            )));
        }
        let real = values
            .iter()
            .map(|r| r.to_f64().filter(|v| v.is_finite()))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::input("step value is not a finite real"))?;
        Ok(StepFunction {
            level,
            values,
            real,
        })
    }

    pub fn from_ratios(level: u32, values: &[(i64, i64)]) -> Result<Self> {
        let values = values
            .iter()
            .map(|&(n, d)| {
                if d == 0 {
                    Err(Error::input("zero denominator"))
                } else {
                    Ok(Rational64::new(n, d))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(level, values)
    }

    pub fn zero() -> Self {
        StepFunction {
            level: 0,
            values: vec![Rational64::zero()],
            real: vec![0.0],
        }
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn values(&self) -> &[Rational64] {
        &self.values
    }

    pub fn real_values(&self) -> &[f64] {
        &self.real
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(Zero::is_zero)
    }

    /// The `i`-th piece (1-based) as `(Δ_i, γ_i)`.
    pub fn piece(&self, i: usize) -> (Interval, f64) {
        let delta = dyadic_interval(self.level, i as u64).expect("piece index within level");
        (delta, self.real[i - 1])
    }

    pub fn pieces(&self) -> impl Iterator<Item = (Interval, f64)> + '_ {
        (1..=self.values.len()).map(|i| self.piece(i))
    }

    /// Value on the half-open dyadic cell containing `x`.
    pub fn eval(&self, x: f64) -> Result<f64> {
        if !(0.0..TWO_PI).contains(&x) {
            return Err(Error::input(format!("x = {x} outside [0, 2π)")));
        }
        let cells = self.values.len();
        let idx = ((x / TWO_PI) * cells as f64).floor() as usize;
        Ok(self.real[idx.min(cells - 1)])
    }

    /// The same function expressed `extra` levels deeper.
    pub fn refine(&self, extra: u32) -> Result<Self> {
        let level = self.level + extra;
        if level > MAX_LEVEL {
            return Err(Error::input(format!("refined level {level} exceeds {MAX_LEVEL}")));
        }
        let rep = 1usize << extra;
        let values = self
            .values
            .iter()
            .flat_map(|v| std::iter::repeat(*v).take(rep))
            .collect();
        Self::new(level, values)
    }

    pub fn refine_to(&self, level: u32) -> Result<Self> {
        if level < self.level {
            return Err(Error::input(format!(
                "cannot coarsen level {} to {level}",
                self.level
            )));
        }
        self.refine(level - self.level)
    }

    pub fn cell_measure(&self) -> f64 {
        TWO_PI / self.values.len() as f64
    }

    /// `∫ f²`, exact from the step data.
    pub fn integral_of_square(&self) -> f64 {
        self.real.iter().map(|v| v * v).sum::<f64>() * self.cell_measure()
    }

    pub fn integral_abs(&self) -> f64 {
        self.real.iter().map(|v| v.abs()).sum::<f64>() * self.cell_measure()
    }

    pub fn sup_norm(&self) -> f64 {
        self.real.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn to_piecewise(&self) -> PiecewiseConstant {
        let cells = self.values.len();
        let width = self.cell_measure();
        let mut breaks: Vec<f64> = (0..cells).map(|i| i as f64 * width).collect();
        breaks.push(TWO_PI);
        PiecewiseConstant::new(breaks, self.real.clone()).expect("dyadic breakpoints are valid")
    }

    pub fn sample(&self, grid: &Grid) -> Vec<f64> {
        let cells = self.values.len();
        grid.sample(|x| {
            let idx = ((x / TWO_PI) * cells as f64).floor() as usize;
            self.real[idx.min(cells - 1)]
        })
    }
}

/// Weighted L¹ distance `∫ |a - b| · w` by the Riemann sum on the grid.
pub fn weighted_l1_distance(a: &[f64], b: &[f64], w: &[f64], grid: &Grid) -> Result<f64> {
    grid.check_len(a)?;
    grid.check_len(b)?;
    grid.check_len(w)?;
    let sum: f64 = a
        .iter()
        .zip(b)
        .zip(w)
        .map(|((x, y), wt)| (x - y).abs() * wt)
        .sum();
    Ok(sum * grid.cell())
}

/// Stern's diatomic sequence.
fn fusc(mut n: u64) -> u64 {
    let (mut a, mut b) = (1u64, 0u64);
    while n > 0 {
        if n & 1 == 1 {
            b += a;
        } else {
            a += b;
        }
        n >>= 1;
    }
    b
}

/// Position of the positive rational `num/den` in the Calkin–Wilf sequence.
fn calkin_wilf_position(mut num: u64, mut den: u64) -> Option<u64> {
    // Walk from the node up to the root, collecting the path bits.
    let mut bits: Vec<bool> = Vec::new();
    while num != den {
        if num > den {
            let q = (num - 1) / den;
            let q = q.max(1);
            bits.extend(std::iter::repeat(true).take(q as usize));
            num -= q * den;
        } else {
            let q = (den - 1) / num;
            let q = q.max(1);
            bits.extend(std::iter::repeat(false).take(q as usize));
            den -= q * num;
        }
        if bits.len() > 62 {
            return None;
        }
    }
    let mut pos = 1u64;
    for bit in bits.iter().rev() {
        pos = pos.checked_mul(2)? + u64::from(*bit);
    }
    Some(pos)
}

/// The `r`-th rational of the enumeration.
pub fn rational_at(r: u64) -> Rational64 {
    if r == 0 {
        return Rational64::zero();
    }
    let j = r.div_ceil(2);
    let q = Rational64::new(fusc(j) as i64, fusc(j + 1) as i64);
    if r % 2 == 1 {
        q
    } else {
        -q
    }
}

/// Inverse of [`rational_at`]; `None` when the index overflows.
pub fn rational_index(q: &Rational64) -> Option<u64> {
    if q.is_zero() {
        return Some(0);
    }
    let num = q.numer().unsigned_abs();
    let den = q.denom().unsigned_abs();
    let pos = calkin_wilf_position(num, den)?;
    let base = pos.checked_mul(2)?;
    Some(if q.is_positive() { base - 1 } else { base })
}

pub(crate) fn cantor_pair(x: u128, y: u128) -> Option<u128> {
    let s = x.checked_add(y)?;
    s.checked_mul(s + 1)?.checked_div(2)?.checked_add(y)
}

pub(crate) fn cantor_unpair(z: u128) -> (u128, u128) {
    // w = floor((sqrt(8z + 1) - 1) / 2), corrected for floating error.
    let mut w = ((((8.0 * z as f64) + 1.0).sqrt() - 1.0) / 2.0).floor() as u128;
    while w * (w + 1) / 2 > z {
        w -= 1;
    }
    while (w + 1) * (w + 2) / 2 <= z {
        w += 1;
    }
    let t = w * (w + 1) / 2;
    let y = z - t;
    (w - y, y)
}

fn decode_tuple(code: u128, len: usize, out: &mut Vec<u64>) {
    if len == 1 {
        out.push(code as u64);
        return;
    }
    let (left, right) = cantor_unpair(code);
    decode_tuple(left, len / 2, out);
    decode_tuple(right, len / 2, out);
}

fn encode_tuple(indices: &[u64]) -> Option<u128> {
    if indices.len() == 1 {
        return Some(u128::from(indices[0]));
    }
    let (l, r) = indices.split_at(indices.len() / 2);
    cantor_pair(encode_tuple(l)?, encode_tuple(r)?)
}

/// The `n`-th step function of the enumeration, `n ≥ 1`.
pub fn enumerate_step(n: u64) -> Result<StepFunction> {
    if n == 0 {
        return Err(Error::input("enumeration starts at index 1"));
    }
    let level = n.trailing_zeros();
    let code = u128::from(n >> (level + 1));
    let mut indices = Vec::with_capacity(1 << level);
    decode_tuple(code, 1usize << level, &mut indices);
    let values = indices.into_iter().map(rational_at).collect();
    StepFunction::new(level, values)
}

/// Index of `f` in the enumeration; `None` if it does not fit in a `u64`.
pub fn index_of(f: &StepFunction) -> Option<u64> {
    let indices = f
        .values
        .iter()
        .map(rational_index)
        .collect::<Option<Vec<_>>>()?;
    let code = encode_tuple(&indices)?;
    let odd = code.checked_mul(2)?.checked_add(1)?;
    let n = odd.checked_mul(1u128 << f.level)?;
    u64::try_from(n).ok()
}
