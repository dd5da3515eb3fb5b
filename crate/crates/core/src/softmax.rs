//! Fixed-point scaled masked-softmax.
//!
//! The unit evaluates `exp(x - max - ln(sum(exp(x - max))))` in four phases
//! per row: maximum search, exponent accumulation, logarithm of the sum and
//! the final exponent. It never divides and never multiplies two variables:
//! the `1/sqrt(d_k) = 1/8` scale is an arithmetic right shift and every
//! constant coefficient is a short shift-add network. The non-test code of
//! this file is kept free of the `*`, `/` and `%` operators so that property
//! can be checked mechanically.
//!
//! Number formats:
//!
//! | value                    | format          |
//! |--------------------------|-----------------|
//! | unscaled logit `D`       | signed, 8 frac bits ([`LOGIT_FRAC`]) |
//! | scaled logit, ln domain  | signed Q10.8 ([`LOGIT`]) |
//! | internal exponent input  | signed, 16 frac bits |
//! | exponent output          | unsigned Q1.30 ([`EXP_FRAC`]) |
//! | exponent sum             | unsigned Q8.16 ([`EXP_SUM`]) |
//! | probability output       | unsigned Q0.8 ([`PROB`]) |

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{AccMatrix, GemmOperand};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedFormat {
    pub name: &'static str,
    pub integer_bits: u32,
    pub fraction_bits: u32,
    pub signed: bool,
}

impl FixedFormat {
    pub const fn total_bits(&self) -> u32 {
        self.integer_bits + self.fraction_bits + self.signed as u32
    }
}

pub const LOGIT: FixedFormat = FixedFormat {
    name: "scaled-logit",
    integer_bits: 10,
    fraction_bits: 8,
    signed: true,
};
pub const EXP_SUM: FixedFormat = FixedFormat {
    name: "exp-sum",
    integer_bits: 8,
    fraction_bits: 16,
    signed: false,
};
pub const PROB: FixedFormat = FixedFormat {
    name: "probability",
    integer_bits: 0,
    fraction_bits: 8,
    signed: false,
};

/// Fraction bits of the logit grid handed over by the QKT pass.
pub const LOGIT_FRAC: u32 = 8;
/// Fraction bits of [`exp_approx`] results.
pub const EXP_FRAC: u32 = 30;
/// Fraction bits of the internal ln-domain values.
const LN_FRAC: u32 = 16;
/// Inputs below -16 flush to zero: exp(-16) is far below one output LSB.
pub const FLUSH_BELOW: i32 = -(16 << LOGIT_FRAC);

const LOGIT_MAX: i32 = (1 << (LOGIT.integer_bits + LOGIT.fraction_bits)) - 1;
const LOGIT_MIN: i32 = -(1 << (LOGIT.integer_bits + LOGIT.fraction_bits));

/// One term of a constant coefficient: `x >> shift`, added or subtracted.
#[derive(Debug, Clone, Copy)]
struct Term {
    shift: u32,
    negative: bool,
}

const fn p(shift: u32) -> Term {
    Term {
        shift,
        negative: false,
    }
}

const fn n(shift: u32) -> Term {
    Term {
        shift,
        negative: true,
    }
}

/// Multiplies by a constant through shifts and adds only.
fn shift_add(x: i64, terms: &[Term]) -> i64 {
    terms.iter().fold(0, |acc, t| {
        let v = x >> t.shift;
        if t.negative {
            acc - v
        } else {
            acc + v
        }
    })
}

/// log2(e) ~= 1 + 1/2 - 1/16 + 1/256 = 1.44140625.
const LOG2_E: [Term; 4] = [p(0), p(1), n(4), p(8)];
/// ln(2) ~= 1/2 + 1/8 + 1/16 + 1/256 + 1/512 = 0.693359375.
const LN_2: [Term; 5] = [p(1), p(3), p(4), p(8), p(9)];

/// 2^f on [0, 1) and log2(1 + f) on [0, 1) are both interpolated by four
/// chords; the top two fraction bits select the chord.
const SEGMENT_BITS: u32 = 2;
const SEGMENT_SHIFT: u32 = LN_FRAC - SEGMENT_BITS;
const SEGMENT_MASK: i64 = (1 << SEGMENT_SHIFT) - 1;

/// round(2^(k/4) * 2^16)
const EXP2_BASE: [i64; 4] = [65536, 77936, 92682, 110218];
/// 4 * (2^((k+1)/4) - 2^(k/4)), canonical signed digits to 2^-14.
const EXP2_SLOPE: [&[Term]; 4] = [
    &[p(0), n(2), p(7), n(10)],
    &[p(0), n(3), p(5), n(7), p(9), n(11), p(13)],
    &[p(0), p(4), p(7)],
    &[p(0), p(2), p(5), n(7), n(11), n(13)],
];
/// round(log2(1 + k/4) * 2^16)
const LOG2_BASE: [i64; 4] = [0, 21098, 38336, 52911];
/// 4 * (log2(1 + (k+1)/4) - log2(1 + k/4)), canonical signed digits to 2^-14.
const LOG2_SLOPE: [&[Term]; 4] = [
    &[p(0), p(2), p(5), p(7), n(9), p(11), p(13)],
    &[p(0), p(4), n(7), n(9), n(11), n(13)],
    &[p(0), n(3), p(6), n(10), n(14)],
    &[p(0), n(2), p(6), p(8), p(10), p(14)],
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskMatrix {
    size: usize,
    masked: Vec<bool>,
}

impl MaskMatrix {
    /// `masked[r][c] == true` marks an illegal connection (M = 1).
    pub fn new(size: usize, masked: Vec<bool>) -> Result<Self> {
        if masked.len() != size.pow(2) {
            return Err(Error::shape("MaskMatrix::new", size.pow(2), masked.len()));
        }
        if size > 0 {
            if let Some(row) = masked.chunks(size).position(|r| r.iter().all(|&m| m)) {
                return Err(Error::FullyMaskedRow { row });
            }
        }
        Ok(Self { size, masked })
    }

    pub fn unmasked(size: usize) -> Self {
        Self {
            size,
            masked: vec![false; size.pow(2)],
        }
    }

    /// Decoder-style mask: position `c` is illegal for query `r` when `c > r`.
    pub fn causal(size: usize) -> Self {
        let mut masked = Vec::with_capacity(size.pow(2));
        for r in 0..size {
            masked.extend((0..size).map(|c| c > r));
        }
        Self { size, masked }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn row(&self, r: usize) -> &[bool] {
        self.masked
            .chunks(self.size)
            .nth(r)
            .expect("mask row in range")
    }

    pub fn is_masked(&self, r: usize, c: usize) -> bool {
        self.row(r)[c]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[bool]> {
        self.masked.chunks(self.size.max(1))
    }

    /// Reorders sequence positions: row/column `i` of the result is
    /// row/column `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut masked = Vec::with_capacity(self.masked.len());
        for &r in perm {
            let row = self.row(r);
            masked.extend(perm.iter().map(|&c| row[c]));
        }
        Self {
            size: self.size,
            masked,
        }
    }
}

/// Softmax output: unsigned Q0.8 probabilities, 1.0 saturating to 255/256.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbMatrix {
    rows: usize,
    cols: usize,
    values: Vec<u8>,
}

impl ProbMatrix {
    pub const SCALE: f64 = 0.00390625;

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn row(&self, r: usize) -> &[u8] {
        self.values.chunks(self.cols).nth(r).expect("row in range")
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.row(r)[c]
    }
}

impl GemmOperand for ProbMatrix {
    fn rows(&self) -> usize {
        self.rows
    }
    fn cols(&self) -> usize {
        self.cols
    }
    fn at(&self, r: usize, c: usize) -> i32 {
        i32::from(self.get(r, c))
    }
    fn scale(&self) -> f64 {
        Self::SCALE
    }
}

/// Divides an unscaled logit by `sqrt(d_k) = 8` with an arithmetic right
/// shift (floor toward negative infinity).
pub fn scale_input(d: i32) -> i32 {
    d >> 3
}

fn saturate_logit(x: i32) -> i32 {
    x.clamp(LOGIT_MIN, LOGIT_MAX)
}

/// Largest unmasked entry of a row.
pub fn row_max(row: &[i32], masked: &[bool]) -> Option<i32> {
    row.iter()
        .zip(masked)
        .filter(|(_, &m)| !m)
        .map(|(&x, _)| x)
        .max()
}

/// 2^t for `t <= 0` given with 16 fraction bits, as Q1.30.
fn exp2_q16(t: i64) -> u64 {
    let whole = t >> LN_FRAC;
    if whole < -(EXP_FRAC as i64) {
        return 0;
    }
    let frac = t & ((1 << LN_FRAC) - 1);
    let seg = (frac >> SEGMENT_SHIFT) as usize;
    let mantissa = EXP2_BASE[seg] + shift_add(frac & SEGMENT_MASK, EXP2_SLOPE[seg]);
    // mantissa is Q1.16 in [1, 2); move to Q1.30 and apply the exponent.
    ((mantissa as u64) << (EXP_FRAC - LN_FRAC)) >> (-whole) as u32
}

/// e^x for `x <= 0` given with 16 fraction bits.
fn exp_q16(x: i64) -> u64 {
    if x < i64::from(FLUSH_BELOW) << (LN_FRAC - LOGIT_FRAC) {
        return 0;
    }
    exp2_q16(shift_add(x, &LOG2_E))
}

/// Approximates `e^x` for a non-positive Q10.8 input; returns Q1.30.
///
/// `x * log2(e)` comes from a shift-add constant, its integer part becomes a
/// right shift and its fraction indexes a four-chord interpolation of `2^f`.
/// Inputs below -16 return 0. Positive inputs are clamped to 0.
pub fn exp_approx(x: i32) -> u64 {
    exp_q16(i64::from(x.min(0)) << (LN_FRAC - LOGIT_FRAC))
}

/// ln(a) for `a > 0` given with 16 fraction bits; result has 16 fraction bits.
fn ln_q16(a: u64) -> Result<i64> {
    if a == 0 {
        return Err(Error::NonPositiveLog(a));
    }
    let lead = 63 - a.leading_zeros();
    let whole = i64::from(lead) - i64::from(LN_FRAC);
    let normalized = if lead >= LN_FRAC {
        a >> (lead - LN_FRAC)
    } else {
        a << (LN_FRAC - lead)
    };
    let frac = (normalized as i64) - (1 << LN_FRAC);
    let seg = (frac >> SEGMENT_SHIFT) as usize;
    let log2 =
        (whole << LN_FRAC) + LOG2_BASE[seg] + shift_add(frac & SEGMENT_MASK, LOG2_SLOPE[seg]);
    Ok(shift_add(log2, &LN_2))
}

/// Approximates `ln(a)` for an unsigned Q8.16 input (the exponent-sum
/// format); returns a signed value with 16 fraction bits.
///
/// Leading-one detection splits `a = 2^w (1 + f)`; `log2(1 + f)` is
/// interpolated by four chords and `(w + log2(1 + f))` is scaled by a
/// shift-add `ln 2`.
pub fn ln_approx(a: u64) -> Result<i64> {
    ln_q16(a)
}

fn round_shift(v: u64, shift: u32) -> u64 {
    let half = 1u64 << (shift - 1);
    let rem = v & ((1u64 << shift) - 1);
    let q = v >> shift;
    if rem > half || (rem == half && q & 1 == 1) {
        q + 1
    } else {
        q
    }
}

/// Scaled masked-softmax of a square logit grid.
///
/// `logits` holds unscaled `Q_i K_i^T` entries with [`LOGIT_FRAC`] fraction
/// bits (scale `2^-8`). Masked positions come out as exact zeros.
pub fn scaled_masked_softmax(logits: &AccMatrix, mask: &MaskMatrix) -> Result<ProbMatrix> {
    let s = mask.size();
    if logits.rows() != s || logits.cols() != s {
        return Err(Error::shape(
            "scaled_masked_softmax",
            format!("{s}x{s}"),
            format!("{}x{}", logits.rows(), logits.cols()),
        ));
    }
    let expected_scale = f64::from(1u32 << LOGIT_FRAC).recip();
    if logits.scale() != expected_scale {
        return Err(Error::shape(
            "scaled_masked_softmax logit scale",
            expected_scale,
            logits.scale(),
        ));
    }
    let mut values = Vec::with_capacity(logits.values().len());
    let widen = LN_FRAC - LOGIT_FRAC;
    for (r, (row, masked)) in logits.values().chunks(s).zip(mask.rows()).enumerate() {
        let scaled: Vec<i32> = row
            .iter()
            .map(|&d| saturate_logit(scale_input(d)))
            .collect();

        // Phase 1: maximum over legal positions.
        let max = row_max(&scaled, masked).ok_or(Error::FullyMaskedRow { row: r })?;

        // Phase 2: sum of exponents, truncated into Q8.16.
        let sum: u64 = scaled
            .iter()
            .zip(masked)
            .filter(|(_, &m)| !m)
            .map(|(&x, _)| exp_approx(x - max) >> (EXP_FRAC - EXP_SUM.fraction_bits))
            .sum();

        // Phase 3: logarithm of the sum (the max entry contributes 1.0, so sum >= 1).
        let ln_sum = ln_q16(sum)?;

        // Phase 4: exp(x - max - ln_sum), rounded into Q0.8.
        for (&x, &m) in scaled.iter().zip(masked) {
            if m {
                values.push(0);
                continue;
            }
            let arg = (i64::from(x - max) << widen) - ln_sum;
            let e = exp_q16(arg.min(0));
            let q = round_shift(e, EXP_FRAC - PROB.fraction_bits);
            values.push(q.min(255) as u8);
        }
    }
    Ok(ProbMatrix {
        rows: s,
        cols: s,
        values,
    })
}
