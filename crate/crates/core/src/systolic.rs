//! The `s x 64` processing-element array.
//!
//! A pass preloads a `k x out_cols` weight tile, streams `k` input vectors
//! (one per cycle) and emits the product column by column. Behind the array
//! sit one row of bias adders and one row of residual adders, followed by an
//! optional ReLU and requantization to INT8.
//!
//! Timing per pass is `ceil(k * out_cols / weight_load_bw)` preload cycles,
//! `k` streaming cycles, plus the fill and drain latencies. Passes run back
//! to back; nothing overlaps a preload.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plan::{GemmPass, PartitionPlan, PassKind};
use crate::quant::{requantize, AccMatrix, GemmOperand, QuantParams, QuantTensor};

/// Timing knobs of the whole datapath. Changing them never changes a
/// computed value, only cycle counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SaTiming {
    /// Weight values loaded into the array per cycle.
    pub weight_load_bw: u64,
    pub fill_latency: u64,
    pub drain_latency: u64,
    /// Cycles between the last column of `G` and the LayerNorm output.
    pub layernorm_tail: u64,
    /// Pipeline depth of the softmax unit on top of its four row sweeps.
    pub softmax_pipeline_depth: u64,
}

impl Default for SaTiming {
    fn default() -> Self {
        Self {
            weight_load_bw: 256,
            fill_latency: 0,
            drain_latency: 0,
            layernorm_tail: 16,
            softmax_pipeline_depth: 12,
        }
    }
}

impl SaTiming {
    pub fn validate(&self) -> Result<()> {
        if self.weight_load_bw == 0 {
            return Err(Error::InvalidConfig(
                "weight_load_bw must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn preload_cycles(&self, stream_len: usize, out_cols: usize) -> u64 {
        ((stream_len * out_cols) as u64).div_ceil(self.weight_load_bw)
    }

    pub fn pass_cycles(&self, stream_len: usize, out_cols: usize) -> u64 {
        self.preload_cycles(stream_len, out_cols)
            + stream_len as u64
            + self.fill_latency
            + self.drain_latency
    }

    /// Completion cycle of each output column, relative to the pass start.
    /// Columns finish evenly across the streaming window; the last one
    /// lands `drain_latency` cycles before the pass ends.
    pub fn column_timestamps(&self, stream_len: usize, out_cols: usize) -> Vec<u64> {
        let base = self.preload_cycles(stream_len, out_cols) + self.fill_latency;
        let k = stream_len as u64;
        let n = out_cols as u64;
        (1..=n).map(|c| base + (c * k).div_ceil(n)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PassResult {
    /// Product after bias, residual and ReLU, in the accumulator domain.
    pub acc: AccMatrix,
    /// Requantized output when an output scale was supplied.
    pub out: Option<QuantTensor>,
    pub cycles: u64,
    pub column_timestamps: Vec<u64>,
}

/// Operands of one pass besides the streamed input.
#[derive(Debug, Clone, Copy)]
pub struct PassOperands<'a> {
    pub weight: &'a QuantTensor,
    /// `1 x out_cols`.
    pub bias: Option<&'a QuantTensor>,
    /// `rows x out_cols`.
    pub residual: Option<&'a QuantTensor>,
    pub out: Option<QuantParams>,
}

/// Exact `A * W` in 32-bit accumulators.
pub fn gemm_i32<A: GemmOperand>(a: &A, w: &QuantTensor) -> Result<AccMatrix> {
    if a.cols() != w.rows() {
        return Err(Error::shape("gemm_i32 contraction", a.cols(), w.rows()));
    }
    let (m, k, n) = (a.rows(), a.cols(), w.cols());
    let mut values = vec![0i32; m * n];
    for r in 0..m {
        let out = &mut values[r * n..(r + 1) * n];
        for t in 0..k {
            let x = a.at(r, t);
            if x == 0 {
                continue;
            }
            for (o, &wv) in out.iter_mut().zip(w.row(t)) {
                *o = o
                    .checked_add(x * i32::from(wv))
                    .ok_or(Error::AccumulatorOverflow("systolic array"))?;
            }
        }
    }
    AccMatrix::new(m, n, values, a.scale() * w.scale())
}

/// Expresses an INT8 tensor in accumulator units of `acc_scale`.
fn to_acc_domain(t: &QuantTensor, acc_scale: f64) -> impl Iterator<Item = i64> + '_ {
    let ratio = t.scale() / acc_scale;
    t.values()
        .iter()
        .map(move |&v| (f64::from(v) * ratio).round_ties_even() as i64)
}

pub fn run_pass<A: GemmOperand>(
    a: &A,
    ops: PassOperands<'_>,
    pass: &GemmPass,
    timing: &SaTiming,
) -> Result<PassResult> {
    timing.validate()?;
    let (k, n) = (pass.stream_len, pass.out_cols);
    if a.rows() != pass.rows || a.cols() != k {
        return Err(Error::shape(
            "run_pass input",
            format!("{}x{k}", pass.rows),
            format!("{}x{}", a.rows(), a.cols()),
        ));
    }
    if ops.weight.rows() != k || ops.weight.cols() != n {
        return Err(Error::shape(
            "run_pass weight tile",
            format!("{k}x{n}"),
            format!("{}x{}", ops.weight.rows(), ops.weight.cols()),
        ));
    }
    if let Some(b) = ops.bias {
        if b.rows() != 1 || b.cols() != n {
            return Err(Error::shape(
                "run_pass bias tile",
                format!("1x{n}"),
                format!("{}x{}", b.rows(), b.cols()),
            ));
        }
    }
    if let Some(r) = ops.residual {
        if r.rows() != pass.rows || r.cols() != n {
            return Err(Error::shape(
                "run_pass residual tile",
                format!("{}x{n}", pass.rows),
                format!("{}x{}", r.rows(), r.cols()),
            ));
        }
    }

    let product = gemm_i32(a, ops.weight)?;
    let scale = product.scale();
    let bias: Vec<i64> = match ops.bias {
        Some(b) => to_acc_domain(b, scale).collect(),
        None => vec![0; n],
    };
    let residual: Vec<i64> = match ops.residual {
        Some(r) => to_acc_domain(r, scale).collect(),
        None => vec![0; pass.rows * n],
    };
    let mut values = Vec::with_capacity(product.values().len());
    for (i, &p) in product.values().iter().enumerate() {
        let mut v = i64::from(p) + bias[i % n] + residual[i];
        if pass.relu {
            v = v.max(0);
        }
        values.push(
            i32::try_from(v).map_err(|_| Error::AccumulatorOverflow("bias/residual adders"))?,
        );
    }
    let acc = AccMatrix::new(pass.rows, n, values, scale)?;
    let out = ops.out.map(|p| requantize(&acc, p));
    Ok(PassResult {
        acc,
        out,
        cycles: timing.pass_cycles(k, n),
        column_timestamps: timing.column_timestamps(k, n),
    })
}

/// Start and end cycle of one executed pass.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassTrace {
    pub id: usize,
    pub kind: PassKind,
    pub head: Option<usize>,
    pub block: usize,
    pub stream_len: usize,
    pub out_cols: usize,
    pub cycles: u64,
    pub start: u64,
    pub end: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SaTrace {
    pub passes: Vec<PassTrace>,
    pub end: u64,
}

/// Lays out every pass of a plan on the array timeline, back to back.
pub fn run_plan(plan: &PartitionPlan, timing: &SaTiming) -> Result<SaTrace> {
    timing.validate()?;
    let mut now = 0;
    let passes = plan
        .passes
        .iter()
        .map(|p| {
            let cycles = timing.pass_cycles(p.stream_len, p.out_cols);
            let t = PassTrace {
                id: p.id,
                kind: p.kind,
                head: p.head,
                block: p.block,
                stream_len: p.stream_len,
                out_cols: p.out_cols,
                cycles,
                start: now,
                end: now + cycles,
            };
            now += cycles;
            t
        })
        .collect();
    Ok(SaTrace { passes, end: now })
}
