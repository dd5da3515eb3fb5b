//! Streaming LayerNorm.
//!
//! Row statistics are accumulated while the array is still producing columns
//! of `G`: every arriving column adds `g` and `g^2` into one lane per row.
//! Once the last column is in, the mean and the one-pass variance
//! `E[g^2] - E[g]^2` are finalized, `1/sqrt(var)` comes from a 256-entry
//! mantissa table and the affine output is produced. Only a short fixed tail
//! separates the last column of `G` from the first output, whatever the
//! width of the row.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{saturate_i8, QuantParams, QuantTensor};

/// Fraction bits of the finalized mean and variance (in accumulator units).
pub const STATS_FRAC: u32 = 8;
/// Variance floor in LSBs of the variance format, standing in for epsilon.
pub const VAR_FLOOR: u64 = 1;
/// Output fraction bits of the inverse-square-root table.
pub const LUT_FRAC: u32 = 15;
pub const LUT_BITS: u32 = 8;
/// Fraction bits of the normalized value before the affine step.
const NORM_FRAC: u32 = 16;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowStats {
    pub sum: i64,
    pub sum_sq: u64,
    pub count: usize,
}

/// Finalized statistics with [`STATS_FRAC`] fraction bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalStats {
    pub mean: i64,
    pub var: u64,
}

/// `s` accumulator lanes fed one column of `G` at a time.
#[derive(Debug, Clone)]
pub struct StatsLanes {
    lanes: Vec<RowStats>,
    width: usize,
    absorbed: usize,
}

impl StatsLanes {
    pub fn new(rows: usize, width: usize) -> Self {
        Self {
            lanes: vec![RowStats::default(); rows],
            width,
            absorbed: 0,
        }
    }

    pub fn lanes(&self) -> &[RowStats] {
        &self.lanes
    }

    pub fn absorbed(&self) -> usize {
        self.absorbed
    }

    /// Adds one column of `G`. Columns must arrive in index order.
    pub fn absorb_column(&mut self, col: &[i32], col_index: usize) -> Result<()> {
        if col_index != self.absorbed {
            return Err(Error::OutOfOrderColumn {
                expected: self.absorbed,
                got: col_index,
            });
        }
        if col.len() != self.lanes.len() {
            return Err(Error::shape("absorb_column", self.lanes.len(), col.len()));
        }
        if self.absorbed == self.width {
            return Err(Error::OutOfOrderColumn {
                expected: self.width,
                got: col_index,
            });
        }
        for (lane, &g) in self.lanes.iter_mut().zip(col) {
            let g = i64::from(g);
            lane.sum = lane
                .sum
                .checked_add(g)
                .ok_or(Error::AccumulatorOverflow("layernorm sum"))?;
            lane.sum_sq = lane
                .sum_sq
                .checked_add(g.unsigned_abs().pow(2))
                .ok_or(Error::AccumulatorOverflow("layernorm sum of squares"))?;
            lane.count += 1;
        }
        self.absorbed += 1;
        Ok(())
    }

    pub fn finalize(&self) -> Result<Vec<FinalStats>> {
        self.lanes
            .iter()
            .map(|l| finalize_stats(l, self.width))
            .collect()
    }
}

fn div_round_half_even(num: i128, den: i128) -> i128 {
    debug_assert!(den > 0);
    let q = num.div_euclid(den);
    let r = num.rem_euclid(den);
    match (2 * r).cmp(&den) {
        std::cmp::Ordering::Less => q,
        std::cmp::Ordering::Greater => q + 1,
        std::cmp::Ordering::Equal => q + (q & 1),
    }
}

/// Mean and one-pass variance of a complete row.
///
/// The variance numerator `d * sum_sq - sum^2` is formed exactly in integers,
/// so it is never negative, and a single rounding produces the result.
pub fn finalize_stats(stats: &RowStats, width: usize) -> Result<FinalStats> {
    if stats.count != width || width == 0 {
        return Err(Error::IncompleteRow {
            absorbed: stats.count,
            expected: width,
        });
    }
    let d = width as i128;
    let one = 1i128 << STATS_FRAC;
    let mean = div_round_half_even(i128::from(stats.sum) * one, d);
    let numerator = d * i128::from(stats.sum_sq) - i128::from(stats.sum).pow(2);
    debug_assert!(numerator >= 0);
    let var = div_round_half_even(numerator * one, d * d);
    Ok(FinalStats {
        mean: mean as i64,
        var: u64::try_from(var).map_err(|_| Error::AccumulatorOverflow("layernorm variance"))?,
    })
}

/// `m^(-1/2)` for `m` in `[1, 2)`, sampled at the centre of each of the 256
/// mantissa bins, in Q1.15.
pub struct InvSqrtLut {
    entries: [u32; 1 << LUT_BITS],
    inv_sqrt2: u32,
}

impl InvSqrtLut {
    fn build() -> Self {
        let one = f64::from(1u32 << LUT_FRAC);
        let mut entries = [0u32; 1 << LUT_BITS];
        for (i, e) in entries.iter_mut().enumerate() {
            let m = 1.0 + (i as f64 + 0.5) / f64::from(1u32 << LUT_BITS);
            *e = (one / m.sqrt()).round() as u32;
        }
        Self {
            entries,
            inv_sqrt2: (one * std::f64::consts::FRAC_1_SQRT_2).round() as u32,
        }
    }

    pub fn get() -> &'static InvSqrtLut {
        static LUT: OnceLock<InvSqrtLut> = OnceLock::new();
        LUT.get_or_init(Self::build)
    }

    pub fn entries(&self) -> &[u32] {
        &self.entries
    }

    /// Folded correction applied on odd exponents.
    pub fn inv_sqrt2(&self) -> u32 {
        self.inv_sqrt2
    }
}

/// `mantissa * 2^(shift - 15)`: a floating value produced by [`inv_sqrt`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvSqrt {
    pub mantissa: u32,
    pub shift: i32,
}

impl InvSqrt {
    pub fn to_f64(self) -> f64 {
        f64::from(self.mantissa) * 2f64.powi(self.shift - LUT_FRAC as i32)
    }
}

/// `(v + eps)^(-1/2)` for a variance with [`STATS_FRAC`] fraction bits.
///
/// Epsilon is realised as a one-LSB floor on `v`. The value is normalized to
/// `2^p * m`, the table supplies `m^(-1/2)` and the exponent becomes a shift;
/// odd `p` picks up the folded `1/sqrt(2)` entry.
pub fn inv_sqrt(v: u64) -> InvSqrt {
    let lut = InvSqrtLut::get();
    let v = v.max(VAR_FLOOR);
    let lead = 63 - v.leading_zeros();
    let idx = if lead >= LUT_BITS {
        (v >> (lead - LUT_BITS)) & ((1 << LUT_BITS) - 1)
    } else {
        (v << (LUT_BITS - lead)) & ((1 << LUT_BITS) - 1)
    } as usize;
    let p = lead as i32 - STATS_FRAC as i32;
    let half = p >> 1;
    let mut mantissa = lut.entries[idx];
    if p & 1 == 1 {
        mantissa = (mantissa * lut.inv_sqrt2 + (1 << (LUT_FRAC - 1))) >> LUT_FRAC;
    }
    InvSqrt {
        mantissa,
        shift: -half,
    }
}

fn shift_round_i128(v: i128, shift: i32) -> i128 {
    if shift <= 0 {
        v << (-shift)
    } else {
        let half = 1i128 << (shift - 1);
        (v + half) >> shift
    }
}

/// Affine LayerNorm output for one row of `G`, requantized to `out`.
pub fn normalize_output(
    row: &[i32],
    stats: FinalStats,
    inv_std: InvSqrt,
    gamma: &QuantTensor,
    beta: &QuantTensor,
    out: QuantParams,
) -> Result<Vec<i8>> {
    if gamma.cols() != row.len() || beta.cols() != row.len() {
        return Err(Error::shape(
            "normalize_output gamma/beta",
            row.len(),
            format!("{}/{}", gamma.cols(), beta.cols()),
        ));
    }
    // (g - mean) has STATS_FRAC fraction bits, inv_std has LUT_FRAC - shift;
    // bring the product to NORM_FRAC.
    let drop = STATS_FRAC as i32 + LUT_FRAC as i32 - inv_std.shift - NORM_FRAC as i32;
    let norm_unit = f64::from(1u32 << NORM_FRAC).recip();
    let gamma_scale = gamma.scale() * norm_unit / out.scale();
    let beta_scale = beta.scale() / out.scale();
    Ok(row
        .iter()
        .enumerate()
        .map(|(j, &g)| {
            let centered = (i128::from(g) << STATS_FRAC) - i128::from(stats.mean);
            let z = shift_round_i128(centered * i128::from(inv_std.mantissa), drop);
            let y = z as f64 * f64::from(gamma.get(0, j)) * gamma_scale
                + f64::from(beta.get(0, j)) * beta_scale;
            saturate_i8(y)
        })
        .collect())
}

/// Cycles between the last column of `G` and the first output for the
/// streaming unit.
pub fn one_pass_extra_cycles(tail: u64) -> u64 {
    tail
}

/// Same quantity for the straightforward unit that only starts after `G`
/// is complete: one sweep over the row for the mean, one for the variance.
pub fn two_pass_extra_cycles(d_model: usize, tail: u64) -> u64 {
    2 * d_model as u64 + tail
}
