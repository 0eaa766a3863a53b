//! Hermitian trigonometric spectra, banded partial sums and coefficient
//! budgets.
//!
//! Only non-negative frequencies are stored; `C_{-k}` is always `conj(C_k)`,
//! so every partial sum is real up to rounding. The rounding residue is
//! checked on every evaluation and the worst ratio seen by the process is
//! kept in a global monitor.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::{Grid, TWO_PI};

/// Relative bound on the imaginary part of an evaluated partial sum.
pub const IMAG_RESIDUE_TOL: f64 = 1e-9;

static MAX_RESIDUE_RATIO: AtomicU64 = AtomicU64::new(0);

/// Worst `max|Im| / Σ|C_k|` observed by any evaluation in this process.
pub fn max_imaginary_residue_ratio() -> f64 {
    f64::from_bits(MAX_RESIDUE_RATIO.load(Ordering::Relaxed))
}

fn record_residue(ratio: f64) {
    // Non-negative doubles order the same way as their bit patterns.
    MAX_RESIDUE_RATIO.fetch_max(ratio.max(0.0).to_bits(), Ordering::Relaxed);
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct HermitianSpectrum {
    coeffs: BTreeMap<u64, Complex64>,
}

impl HermitianSpectrum {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sets `C_k` (and implicitly `C_{-k}`). `C_0` must be real.
    pub fn insert(&mut self, k: u64, c: Complex64) -> Result<()> {
        if k == 0 && c.im != 0.0 {
            return Err(Error::input("C_0 must be real"));
        }
        if !c.re.is_finite() || !c.im.is_finite() {
            return Err(Error::input(format!("non-finite coefficient at k = {k}")));
        }
        self.coeffs.insert(k, c);
        Ok(())
    }

    pub fn get(&self, k: i64) -> Complex64 {
        let c = self
            .coeffs
            .get(&k.unsigned_abs())
            .copied()
            .unwrap_or_default();
        if k < 0 {
            c.conj()
        } else {
            c
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, Complex64)> + '_ {
        self.coeffs.iter().map(|(&k, &c)| (k, c))
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// `Σ_k |C_k|²` over both signs of `k`.
    pub fn energy(&self) -> f64 {
        self.iter()
            .map(|(k, c)| if k == 0 { c.norm_sqr() } else { 2.0 * c.norm_sqr() })
            .sum()
    }
}

/// One frequency band `lo ≤ |k| < hi` with its coefficients for `k ≥ 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CoeffBlockRepr", into = "CoeffBlockRepr")]
pub struct CoeffBlock {
    s: usize,
    lo: u64,
    hi: u64,
    coeffs: Vec<Complex64>,
}

#[derive(Serialize, Deserialize)]
struct CoeffBlockRepr {
    s: usize,
    lo: u64,
    hi: u64,
    coeffs: Vec<(u64, f64, f64)>,
}

impl TryFrom<CoeffBlockRepr> for CoeffBlock {
    type Error = Error;

    fn try_from(r: CoeffBlockRepr) -> Result<Self> {
        let mut block = CoeffBlock::zeros(r.s, r.lo, r.hi)?;
        for (k, re, im) in r.coeffs {
            block.set(k, Complex64::new(re, im))?;
        }
        Ok(block)
    }
}

impl From<CoeffBlock> for CoeffBlockRepr {
    fn from(b: CoeffBlock) -> Self {
        CoeffBlockRepr {
            s: b.s,
            lo: b.lo,
            hi: b.hi,
            coeffs: b
                .coeffs
                .iter()
                .enumerate()
                .map(|(i, c)| (b.lo + i as u64, c.re, c.im))
                .collect(),
        }
    }
}

impl CoeffBlock {
    pub fn zeros(s: usize, lo: u64, hi: u64) -> Result<Self> {
        if lo < 1 || hi <= lo {
            return Err(Error::input(format!("band [{lo}, {hi}) must satisfy 1 ≤ lo < hi")));
        }
        Ok(CoeffBlock {
            s,
            lo,
            hi,
            coeffs: vec![Complex64::default(); (hi - lo) as usize],
        })
    }

    pub fn new(s: usize, lo: u64, coeffs: Vec<Complex64>) -> Result<Self> {
        let hi = lo + coeffs.len() as u64;
        let mut block = Self::zeros(s, lo, hi)?;
        for (i, c) in coeffs.into_iter().enumerate() {
            block.set(lo + i as u64, c)?;
        }
        Ok(block)
    }

    pub fn set(&mut self, k: u64, c: Complex64) -> Result<()> {
        if k < self.lo || k >= self.hi {
            return Err(Error::input(format!(
                "frequency {k} outside band [{}, {})",
                self.lo, self.hi
            )));
        }
        if !c.re.is_finite() || !c.im.is_finite() {
            return Err(Error::input(format!("non-finite coefficient at k = {k}")));
        }
        self.coeffs[(k - self.lo) as usize] = c;
        Ok(())
    }

    pub fn s(&self) -> usize {
        self.s
    }

    pub fn lo(&self) -> u64 {
        self.lo
    }

    pub fn hi(&self) -> u64 {
        self.hi
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn get(&self, k: i64) -> Complex64 {
        let a = k.unsigned_abs();
        if a < self.lo || a >= self.hi {
            return Complex64::default();
        }
        let c = self.coeffs[(a - self.lo) as usize];
        if k < 0 {
            c.conj()
        } else {
            c
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, Complex64)> + '_ {
        self.coeffs
            .iter()
            .enumerate()
            .map(move |(i, &c)| (self.lo + i as u64, c))
    }

    /// `Σ_band |C_k|²` over both signs.
    pub fn energy(&self) -> f64 {
        2.0 * self.coeffs.iter().map(|c| c.norm_sqr()).sum::<f64>()
    }

    pub fn max_abs(&self) -> f64 {
        self.coeffs.iter().fold(0.0, |m, c| m.max(c.norm()))
    }

    pub fn sum_abs(&self) -> f64 {
        2.0 * self.coeffs.iter().map(|c| c.norm()).sum::<f64>()
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|c| c.norm_sqr() == 0.0)
    }

    pub fn to_spectrum(&self) -> HermitianSpectrum {
        let mut spec = HermitianSpectrum::new();
        for (k, c) in self.iter() {
            spec.coeffs.insert(k, c);
        }
        spec
    }
}

/// Serializes a band list as `{"bands": [...]}`.
pub mod bands_format {
    use super::CoeffBlock;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize)]
    struct Out<'a> {
        bands: &'a [CoeffBlock],
    }

    #[derive(Deserialize)]
    struct In {
        bands: Vec<CoeffBlock>,
    }

    pub fn serialize<S: Serializer>(bands: &[CoeffBlock], s: S) -> Result<S::Ok, S::Error> {
        Out { bands }.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<CoeffBlock>, D::Error> {
        In::deserialize(d).map(|i| i.bands)
    }
}

/// Bands are strictly increasing and pairwise disjoint.
pub fn check_bands(blocks: &[CoeffBlock]) -> Result<()> {
    for w in blocks.windows(2) {
        if w[1].lo < w[0].hi {
            return Err(Error::invariant(format!(
                "bands [{}, {}) and [{}, {}) overlap or are out of order",
                w[0].lo, w[0].hi, w[1].lo, w[1].hi
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Modulus {
    /// `ω(t) = t^α`.
    Power { alpha: f64 },
    /// `ω(t) = 1 / log(e + 1/t)`.
    LogReciprocal,
    /// Monotone linear interpolation through `(t, ω)` points, with `ω(0) = 0`
    /// prepended and the last value held beyond the table.
    Table { points: Vec<(f64, f64)> },
}

impl Modulus {
    pub fn validate(&self) -> Result<()> {
        match self {
            Modulus::Power { alpha } => {
                if !(alpha.is_finite() && *alpha > 0.0) {
                    return Err(Error::input(format!("power modulus needs α > 0, got {alpha}")));
                }
            }
            Modulus::LogReciprocal => {}
            Modulus::Table { points } => {
                if points.is_empty() {
                    return Err(Error::input("modulus table is empty"));
                }
                let mut prev = (0.0, 0.0);
                for (i, &(t, w)) in points.iter().enumerate() {
                    if !(t.is_finite() && w.is_finite()) {
                        return Err(Error::input("modulus table has non-finite entries"));
                    }
                    let first_origin = i == 0 && t == 0.0;
                    if first_origin {
                        if w != 0.0 {
                            return Err(Error::input("modulus table must have ω(0) = 0"));
                        }
                        continue;
                    }
                    if t <= prev.0 || w <= prev.1 {
                        return Err(Error::input(
                            "modulus table must be strictly increasing in t and ω",
                        ));
                    }
                    prev = (t, w);
                }
            }
        }
        Ok(())
    }

    pub fn eval(&self, t: f64) -> f64 {
        let t = t.max(0.0);
        match self {
            Modulus::Power { alpha } => t.powf(*alpha),
            Modulus::LogReciprocal => {
                if t == 0.0 {
                    0.0
                } else {
                    1.0 / (std::f64::consts::E + 1.0 / t).ln()
                }
            }
            Modulus::Table { points } => {
                let mut prev = (0.0, 0.0);
                for &(x, w) in points {
                    if t <= x {
                        if x == prev.0 {
                            return w;
                        }
                        return prev.1 + (w - prev.1) * (t - prev.0) / (x - prev.0);
                    }
                    prev = (x, w);
                }
                prev.1
            }
        }
    }
}

/// `C_k = (1/2π) Σ_j values_j e^{-ikx_j} · cell` for `0 ≤ k ≤ max_freq`.
pub fn fourier_coefficients(values: &[f64], grid: &Grid, max_freq: u64) -> Result<HermitianSpectrum> {
    grid.check_len(values)?;
    let n = grid.len() as u64;
    if max_freq >= n / 2 {
        return Err(Error::input(format!(
            "max_freq {max_freq} aliases on a grid of {n} points"
        )));
    }
    let mut buf: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    grid.fft_forward(&mut buf);
    let scale = 1.0 / n as f64;
    let mut spec = HermitianSpectrum::new();
    for k in 0..=max_freq {
        let mut c = buf[k as usize] * scale;
        if k == 0 {
            c.im = 0.0;
        }
        spec.coeffs.insert(k, c);
    }
    Ok(spec)
}

/// Samples of `Σ_{|k| ≤ m} C_k e^{ikx_j}` over all blocks.
pub fn eval_partial_sum(blocks: &[CoeffBlock], m: u64, grid: &Grid) -> Result<Vec<f64>> {
    let n = grid.len();
    let mut buf = vec![Complex64::default(); n];
    let mut total = 0.0;
    for b in blocks {
        for (k, c) in b.iter() {
            if k > m {
                break;
            }
            if c.norm_sqr() == 0.0 {
                continue;
            }
            if k as usize >= n / 2 {
                return Err(Error::input(format!(
                    "frequency {k} is not resolved by a grid of {n} points"
                )));
            }
            buf[k as usize] += c;
            buf[n - k as usize] += c.conj();
            total += 2.0 * c.norm();
        }
    }
    eval_buffer(buf, total, grid)
}

/// Samples of a full Hermitian spectrum (including `C_0`).
pub fn eval_spectrum(spec: &HermitianSpectrum, grid: &Grid) -> Result<Vec<f64>> {
    let n = grid.len();
    let mut buf = vec![Complex64::default(); n];
    let mut total = 0.0;
    for (k, c) in spec.iter() {
        if k as usize >= n / 2 {
            return Err(Error::input(format!(
                "frequency {k} is not resolved by a grid of {n} points"
            )));
        }
        if k == 0 {
            buf[0] += c;
            total += c.norm();
        } else {
            buf[k as usize] += c;
            buf[n - k as usize] += c.conj();
            total += 2.0 * c.norm();
        }
    }
    eval_buffer(buf, total, grid)
}

fn eval_buffer(mut buf: Vec<Complex64>, total: f64, grid: &Grid) -> Result<Vec<f64>> {
    if total == 0.0 {
        record_residue(0.0);
        return Ok(vec![0.0; buf.len()]);
    }
    grid.fft_inverse(&mut buf);
    let max_im = buf.iter().fold(0.0f64, |m, z| m.max(z.im.abs()));
    let ratio = max_im / total;
    record_residue(ratio);
    if ratio > IMAG_RESIDUE_TOL {
        return Err(Error::invariant(format!(
            "partial sum has imaginary residue {max_im:.3e} against Σ|C| = {total:.3e}"
        )));
    }
    Ok(buf.into_iter().map(|z| z.re).collect())
}

/// Incremental partial sums on a private uniform grid, one frequency at a
/// time. Used where every `m` of a band must be visited.
pub struct PartialSumSweep {
    roots: Vec<Complex64>,
    sum: Vec<f64>,
    abs_total: f64,
}

impl PartialSumSweep {
    /// A sweep on `2^log2_points` samples; frequencies must stay below half that.
    pub fn new(log2_points: u32) -> Self {
        let n = 1usize << log2_points;
        let roots = (0..n)
            .map(|j| Complex64::from_polar(1.0, TWO_PI * j as f64 / n as f64))
            .collect();
        PartialSumSweep {
            roots,
            sum: vec![0.0; n],
            abs_total: 0.0,
        }
    }

    /// Smallest sweep grid with at least `per_period` samples per period of `max_freq`.
    pub fn for_max_freq(max_freq: u64, per_period: u64) -> Self {
        let need = (max_freq.max(1) * per_period).max(1024);
        let log2 = 64 - (need - 1).leading_zeros();
        Self::new(log2)
    }

    pub fn len(&self) -> usize {
        self.sum.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sum.is_empty()
    }

    pub fn cell(&self) -> f64 {
        TWO_PI / self.sum.len() as f64
    }

    /// Adds `C_k e^{ikx} + conj(C_k) e^{-ikx}`.
    pub fn add(&mut self, k: u64, c: Complex64) {
        let n = self.sum.len();
        assert!((k as usize) < n / 2, "frequency {k} not resolved by sweep grid");
        if c.norm_sqr() == 0.0 {
            return;
        }
        let step = k as usize % n;
        let mut idx = 0usize;
        for v in self.sum.iter_mut() {
            let z = self.roots[idx];
            *v += 2.0 * (c.re * z.re - c.im * z.im);
            idx += step;
            if idx >= n {
                idx -= n;
            }
        }
        self.abs_total += 2.0 * c.norm();
    }

    pub fn values(&self) -> &[f64] {
        &self.sum
    }

    pub fn sup_norm(&self) -> f64 {
        self.sum.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn abs_total(&self) -> f64 {
        self.abs_total
    }
}

/// `Σ |C_k|² ω(|C_k|)` over both signs of `k`.
pub fn coefficient_budget<'a>(blocks: impl IntoIterator<Item = &'a CoeffBlock>, omega: &Modulus) -> f64 {
    blocks
        .into_iter()
        .flat_map(|b| b.coeffs.iter())
        .map(|c| {
            let a = c.norm();
            2.0 * a * a * omega.eval(a)
        })
        .sum()
}

/// `Σ |C_k| ω(|C_k|)`, the first-power variant. Diagnostic only.
pub fn coefficient_budget_first_power<'a>(
    blocks: impl IntoIterator<Item = &'a CoeffBlock>,
    omega: &Modulus,
) -> f64 {
    blocks
        .into_iter()
        .flat_map(|b| b.coeffs.iter())
        .map(|c| {
            let a = c.norm();
            2.0 * a * omega.eval(a)
        })
        .sum()
}

/// `|Σ_k |C_k|² - (1/2π) ∫ values²|`, with the integral as a Riemann sum.
pub fn parseval_defect(values: &[f64], spec: &HermitianSpectrum, grid: &Grid) -> Result<f64> {
    grid.check_len(values)?;
    let mean_square = values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64;
    Ok((spec.energy() - mean_square).abs())
}
