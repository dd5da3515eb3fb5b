//! Symmetric per-tensor INT8 quantization.
//!
//! Every activation and weight is carried as a [`QuantTensor`]: an INT8 grid
//! in `[-127, 127]` plus a single real-valued scale, with the zero point fixed
//! at 0. Products accumulate into an [`AccMatrix`] of 32-bit integers whose
//! scale is the product of the operand scales. All rounding is
//! round-half-to-even.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Largest representable magnitude; -128 is never produced.
pub const QMAX: i32 = 127;

/// Rounds half to even and saturates into the symmetric INT8 range.
#[inline]
pub fn saturate_i8(v: f64) -> i8 {
    v.round_ties_even().clamp(-(QMAX as f64), QMAX as f64) as i8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    scale: f64,
}

impl QuantParams {
    pub fn new(scale: f64) -> Result<Self> {
        if scale.is_finite() && scale > 0.0 {
            Ok(Self { scale })
        } else {
            Err(Error::InvalidScale(scale))
        }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Always 0: the scheme is symmetric.
    pub fn zero_point(&self) -> i32 {
        0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantTensor {
    rows: usize,
    cols: usize,
    values: Vec<i8>,
    params: QuantParams,
}

impl QuantTensor {
    pub fn new(rows: usize, cols: usize, values: Vec<i8>, params: QuantParams) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::shape("QuantTensor::new", rows * cols, values.len()));
        }
        if let Some(index) = values.iter().position(|&v| v == i8::MIN) {
            return Err(Error::OutOfRange {
                index,
                value: i8::MIN as i32,
            });
        }
        Ok(Self {
            rows,
            cols,
            values,
            params,
        })
    }

    pub fn zeros(rows: usize, cols: usize, params: QuantParams) -> Self {
        Self {
            rows,
            cols,
            values: vec![0; rows * cols],
            params,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn params(&self) -> QuantParams {
        self.params
    }

    pub fn scale(&self) -> f64 {
        self.params.scale
    }

    pub fn values(&self) -> &[i8] {
        &self.values
    }

    pub fn get(&self, r: usize, c: usize) -> i8 {
        self.values[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[i8] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col_block(&self, start: usize, width: usize) -> QuantTensor {
        let mut values = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            values.extend_from_slice(&self.row(r)[start..start + width]);
        }
        QuantTensor {
            rows: self.rows,
            cols: width,
            values,
            params: self.params,
        }
    }

    pub fn row_block(&self, start: usize, height: usize) -> QuantTensor {
        QuantTensor {
            rows: height,
            cols: self.cols,
            values: self.values[start * self.cols..(start + height) * self.cols].to_vec(),
            params: self.params,
        }
    }

    pub fn transpose(&self) -> QuantTensor {
        let mut values = Vec::with_capacity(self.values.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                values.push(self.get(r, c));
            }
        }
        QuantTensor {
            rows: self.cols,
            cols: self.rows,
            values,
            params: self.params,
        }
    }

    /// Concatenates equally tall tensors side by side. All parts must share
    /// one scale.
    pub fn hconcat(parts: &[QuantTensor]) -> Result<QuantTensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("QuantTensor::hconcat", "at least one part", 0))?;
        let rows = first.rows;
        let params = first.params;
        let cols = parts.iter().map(|p| p.cols).sum();
        for p in parts {
            if p.rows != rows {
                return Err(Error::shape("QuantTensor::hconcat rows", rows, p.rows));
            }
            if p.params != params {
                return Err(Error::shape(
                    "QuantTensor::hconcat scale",
                    params.scale,
                    p.params.scale,
                ));
            }
        }
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                values.extend_from_slice(p.row(r));
            }
        }
        Ok(QuantTensor {
            rows,
            cols,
            values,
            params,
        })
    }
}

/// 32-bit accumulator grid, the array output before requantization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccMatrix {
    rows: usize,
    cols: usize,
    values: Vec<i32>,
    scale: f64,
}

impl AccMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<i32>, scale: f64) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::shape("AccMatrix::new", rows * cols, values.len()));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidScale(scale));
        }
        Ok(Self {
            rows,
            cols,
            values,
            scale,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn values(&self) -> &[i32] {
        &self.values
    }

    pub fn get(&self, r: usize, c: usize) -> i32 {
        self.values[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[i32] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<i32> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn to_real(&self) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |r, c| {
            self.get(r, c) as f64 * self.scale
        })
    }

    /// Writes `block` into columns starting at `start`; scales must agree.
    pub fn set_col_block(&mut self, start: usize, block: &AccMatrix) {
        assert_eq!(block.rows, self.rows, "set_col_block rows");
        for r in 0..self.rows {
            let dst = &mut self.values[r * self.cols + start..r * self.cols + start + block.cols];
            dst.copy_from_slice(block.row(r));
        }
    }

    pub fn set_row_block(&mut self, start: usize, block: &AccMatrix) {
        assert_eq!(block.cols, self.cols, "set_row_block cols");
        self.values[start * self.cols..(start + block.rows) * self.cols]
            .copy_from_slice(&block.values);
    }
}

/// Anything the array can stream as its left operand.
pub trait GemmOperand {
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;
    fn at(&self, r: usize, c: usize) -> i32;
    fn scale(&self) -> f64;

    fn real(&self, r: usize, c: usize) -> f64 {
        f64::from(self.at(r, c)) * self.scale()
    }
}

impl GemmOperand for QuantTensor {
    fn rows(&self) -> usize {
        self.rows
    }
    fn cols(&self) -> usize {
        self.cols
    }
    fn at(&self, r: usize, c: usize) -> i32 {
        self.get(r, c) as i32
    }
    fn scale(&self) -> f64 {
        self.params.scale
    }
}

pub fn quantize(x: &Matrix, params: QuantParams) -> Result<QuantTensor> {
    let scale = params.scale;
    let mut values = Vec::with_capacity(x.rows() * x.cols());
    for r in 0..x.rows() {
        for (c, &v) in x.row(r).iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    row: r,
                    col: c,
                    value: v,
                });
            }
            values.push(saturate_i8(v / scale));
        }
    }
    Ok(QuantTensor {
        rows: x.rows(),
        cols: x.cols(),
        values,
        params,
    })
}

pub fn dequantize(q: &QuantTensor) -> Matrix {
    Matrix::from_fn(q.rows, q.cols, |r, c| q.get(r, c) as f64 * q.params.scale)
}

pub fn requantize(acc: &AccMatrix, out: QuantParams) -> QuantTensor {
    let ratio = acc.scale / out.scale;
    QuantTensor {
        rows: acc.rows,
        cols: acc.cols,
        values: acc
            .values
            .iter()
            .map(|&v| saturate_i8(v as f64 * ratio))
            .collect(),
        params: out,
    }
}

/// Re-expresses an accumulator grid at another 32-bit scale (saturating).
pub fn rescale_acc(acc: &AccMatrix, scale: f64) -> Result<AccMatrix> {
    let ratio = acc.scale / scale;
    let values = acc
        .values
        .iter()
        .map(|&v| {
            (v as f64 * ratio)
                .round_ties_even()
                .clamp(i32::MIN as f64, i32::MAX as f64) as i32
        })
        .collect();
    AccMatrix::new(acc.rows, acc.cols, values, scale)
}
