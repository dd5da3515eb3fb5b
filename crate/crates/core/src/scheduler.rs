//! End-to-end execution of both ResBlocks.
//!
//! The array runs the partition plan back to back. The softmax unit is a
//! second timeline: head `i`'s softmax starts once its last `Q_i K_i^T`
//! pass is done and has to finish before that head's `V` projection ends,
//! because the `AV` pass that follows consumes its output. A late softmax is
//! reported as a scheduling fault; the timeline is not stretched to hide it.
//! LayerNorm statistics absorb the columns of `G` as the output-projection
//! (or second FFN layer) passes produce them, so only the LayerNorm tail
//! follows the last array pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layernorm::{inv_sqrt, normalize_output, two_pass_extra_cycles, StatsLanes};
use crate::plan::{
    plan_ffn, plan_mha, Block, ModelConfig, PartitionPlan, PassKind, TileRef, HEAD_DIM,
};
use crate::quant::{dequantize, rescale_acc, AccMatrix, QuantParams, QuantTensor};
use crate::reference::{HeadWeights, ResBlockWeights};
use crate::softmax::{scaled_masked_softmax, MaskMatrix, ProbMatrix, LOGIT_FRAC};
use crate::systolic::{run_pass, run_plan, PassOperands, PassTrace, SaTiming};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantHeadWeights {
    pub w_q: QuantTensor,
    pub w_k: QuantTensor,
    pub w_v: QuantTensor,
    pub b_q: QuantTensor,
    pub b_k: QuantTensor,
    pub b_v: QuantTensor,
}

/// INT8 counterpart of [`ResBlockWeights`]; bias and affine vectors are
/// `1 x n` tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantResBlockWeights {
    pub heads: Vec<QuantHeadWeights>,
    pub w_g: QuantTensor,
    pub b_g: QuantTensor,
    pub w_1: QuantTensor,
    pub b_1: QuantTensor,
    pub w_2: QuantTensor,
    pub b_2: QuantTensor,
    pub gamma: QuantTensor,
    pub beta: QuantTensor,
}

fn vector(t: &QuantTensor) -> Vec<f64> {
    dequantize(t).row(0).to_vec()
}

impl QuantResBlockWeights {
    /// The real-valued weights the integer pipeline actually represents.
    pub fn dequantize(&self) -> ResBlockWeights {
        ResBlockWeights {
            heads: self
                .heads
                .iter()
                .map(|h| HeadWeights {
                    w_q: dequantize(&h.w_q),
                    w_k: dequantize(&h.w_k),
                    w_v: dequantize(&h.w_v),
                    b_q: vector(&h.b_q),
                    b_k: vector(&h.b_k),
                    b_v: vector(&h.b_v),
                })
                .collect(),
            w_g: dequantize(&self.w_g),
            b_g: vector(&self.b_g),
            w_1: dequantize(&self.w_1),
            b_1: vector(&self.b_1),
            w_2: dequantize(&self.w_2),
            b_2: vector(&self.b_2),
            gamma: vector(&self.gamma),
            beta: vector(&self.beta),
        }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let (d, f) = (cfg.d_model(), cfg.d_ff());
        if self.heads.len() != cfg.heads() {
            return Err(Error::shape(
                "QuantResBlockWeights heads",
                cfg.heads(),
                self.heads.len(),
            ));
        }
        for h in &self.heads {
            expect_shape("W_Q", &h.w_q, d, HEAD_DIM)?;
            expect_shape("W_K", &h.w_k, d, HEAD_DIM)?;
            expect_shape("W_V", &h.w_v, d, HEAD_DIM)?;
            expect_shape("Bias_Q", &h.b_q, 1, HEAD_DIM)?;
            expect_shape("Bias_K", &h.b_k, 1, HEAD_DIM)?;
            expect_shape("Bias_V", &h.b_v, 1, HEAD_DIM)?;
        }
        expect_shape("W_G", &self.w_g, d, d)?;
        expect_shape("Bias_G", &self.b_g, 1, d)?;
        expect_shape("W_1", &self.w_1, d, f)?;
        expect_shape("b_1", &self.b_1, 1, f)?;
        expect_shape("W_2", &self.w_2, f, d)?;
        expect_shape("b_2", &self.b_2, 1, d)?;
        expect_shape("gamma", &self.gamma, 1, d)?;
        expect_shape("beta", &self.beta, 1, d)
    }

    /// Every tensor with its canonical name, in bundle order.
    pub fn named(&self) -> Vec<(String, &QuantTensor)> {
        let mut out = Vec::new();
        for (i, h) in self.heads.iter().enumerate() {
            out.push((format!("head{i}.w_q"), &h.w_q));
            out.push((format!("head{i}.w_k"), &h.w_k));
            out.push((format!("head{i}.w_v"), &h.w_v));
            out.push((format!("head{i}.b_q"), &h.b_q));
            out.push((format!("head{i}.b_k"), &h.b_k));
            out.push((format!("head{i}.b_v"), &h.b_v));
        }
        for (name, t) in [
            ("w_g", &self.w_g),
            ("b_g", &self.b_g),
            ("w_1", &self.w_1),
            ("b_1", &self.b_1),
            ("w_2", &self.w_2),
            ("b_2", &self.b_2),
            ("gamma", &self.gamma),
            ("beta", &self.beta),
        ] {
            out.push((name.to_string(), t));
        }
        out
    }
}

/// Output scales of the MHA intermediates. The softmax output is fixed
/// at 1/256 and `G` stays in the accumulator domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MhaScales {
    /// Query projections (Temp1).
    pub q_proj: QuantParams,
    /// Key projections (Temp2 before the softmax).
    pub k_proj: QuantParams,
    /// Value projections (Temp2 after the softmax).
    pub v_proj: QuantParams,
    /// Concatenated head outputs `P`.
    pub attention: QuantParams,
    pub output: QuantParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FfnScales {
    /// `ReLU(X W_1 + b_1)`, one scale for all `4h` blocks.
    pub hidden: QuantParams,
    pub output: QuantParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "block", rename_all = "snake_case")]
pub enum ActivationScales {
    Mha(MhaScales),
    Ffn(FfnScales),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SoftmaxWindow {
    pub head: usize,
    pub qkt_done: u64,
    pub softmax_start: u64,
    pub softmax_done: u64,
    pub vproj_done: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerNormWindow {
    /// Cycle at which the last column of `G` is complete.
    pub last_column: u64,
    /// All `s` lanes emit in parallel, so first and last output coincide.
    pub first_out: u64,
    pub last_out: u64,
    /// Where the output would start with a unit that begins only after `G`
    /// is complete.
    pub two_pass_first_out: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    SchedulingFault,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlapViolation {
    pub head: usize,
    pub softmax_done: u64,
    pub vproj_done: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub block: Block,
    pub config: ModelConfig,
    pub timing: SaTiming,
    pub per_pass: Vec<PassTrace>,
    pub softmax_windows: Vec<SoftmaxWindow>,
    pub layernorm: LayerNormWindow,
    pub streaming_lower_bound: u64,
    pub total_cycles: u64,
    pub status: RunStatus,
}

impl CycleReport {
    pub fn latency_seconds(&self, clock_hz: f64) -> Result<f64> {
        derive_latency(self.total_cycles, clock_hz)
    }

    pub fn violations(&self) -> Vec<OverlapViolation> {
        check_overlap(self)
    }
}

pub fn softmax_latency(s: usize, pipeline_depth: u64) -> u64 {
    4 * s as u64 + pipeline_depth
}

/// Heads whose softmax finishes after their `V` projection.
pub fn check_overlap(report: &CycleReport) -> Vec<OverlapViolation> {
    report
        .softmax_windows
        .iter()
        .filter(|w| w.softmax_done > w.vproj_done)
        .map(|w| OverlapViolation {
            head: w.head,
            softmax_done: w.softmax_done,
            vproj_done: w.vproj_done,
        })
        .collect()
}

pub fn derive_latency(total_cycles: u64, clock_hz: f64) -> Result<f64> {
    if !(clock_hz.is_finite() && clock_hz > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "clock must be positive, got {clock_hz}"
        )));
    }
    Ok(total_cycles as f64 / clock_hz)
}

pub fn speedup(reference_latency: f64, this_latency: f64) -> f64 {
    reference_latency / this_latency
}

/// Cycle accounting of a plan without computing any values.
pub fn build_report(plan: &PartitionPlan, timing: &SaTiming) -> Result<CycleReport> {
    let trace = run_plan(plan, timing)?;
    let cfg = plan.config;
    let s = cfg.seq_len();

    let mut softmax_windows = Vec::new();
    if plan.block == Block::Mha {
        let mut unit_free = 0;
        for head in 0..cfg.heads() {
            let of_head = |kind| {
                trace
                    .passes
                    .iter()
                    .filter(move |p| p.head == Some(head) && p.kind == kind)
            };
            let qkt_done = of_head(PassKind::Qkt).map(|p| p.end).max().unwrap_or(0);
            let vproj_done = of_head(PassKind::Vproj).map(|p| p.end).max().unwrap_or(0);
            let softmax_start = qkt_done.max(unit_free);
            let softmax_done = softmax_start + softmax_latency(s, timing.softmax_pipeline_depth);
            unit_free = softmax_done;
            softmax_windows.push(SoftmaxWindow {
                head,
                qkt_done,
                softmax_start,
                softmax_done,
                vproj_done,
            });
        }
    }

    let g_kind = match plan.block {
        Block::Mha => PassKind::OutProjBlock,
        Block::Ffn => PassKind::Ffn2Block,
    };
    let last_g = trace
        .passes
        .iter()
        .rev()
        .find(|p| p.kind == g_kind)
        .ok_or_else(|| Error::InvalidConfig("plan has no G-producing pass".into()))?;
    let last_column = last_g.start
        + timing
            .column_timestamps(last_g.stream_len, last_g.out_cols)
            .last()
            .copied()
            .unwrap_or(0);
    let first_out = last_column + timing.layernorm_tail;
    let layernorm = LayerNormWindow {
        last_column,
        first_out,
        last_out: first_out,
        two_pass_first_out: last_column
            + two_pass_extra_cycles(cfg.d_model(), timing.layernorm_tail),
    };

    let mut report = CycleReport {
        block: plan.block,
        config: cfg,
        timing: *timing,
        per_pass: trace.passes,
        softmax_windows,
        layernorm,
        streaming_lower_bound: plan.streaming_lower_bound(),
        total_cycles: first_out,
        status: RunStatus::Ok,
    };
    if !check_overlap(&report).is_empty() {
        report.status = RunStatus::SchedulingFault;
    }
    Ok(report)
}

pub fn mha_cycle_report(cfg: &ModelConfig, timing: &SaTiming) -> Result<CycleReport> {
    build_report(&plan_mha(cfg), timing)
}

pub fn ffn_cycle_report(cfg: &ModelConfig, timing: &SaTiming) -> Result<CycleReport> {
    build_report(&plan_ffn(cfg), timing)
}

fn expect_shape(context: &'static str, t: &QuantTensor, rows: usize, cols: usize) -> Result<()> {
    if t.rows() != rows || t.cols() != cols {
        return Err(Error::shape(
            context,
            format!("{rows}x{cols}"),
            format!("{}x{}", t.rows(), t.cols()),
        ));
    }
    Ok(())
}

fn cols_of(t: &QuantTensor, tile: &TileRef) -> QuantTensor {
    t.col_block(tile.cols.start, tile.cols.len)
}

/// Feeds finished `G` columns into the LayerNorm lanes and produces the
/// output once all columns are in.
struct LayerNormStage {
    lanes: StatsLanes,
    g: AccMatrix,
}

impl LayerNormStage {
    fn new(rows: usize, width: usize) -> Result<Self> {
        Ok(Self {
            lanes: StatsLanes::new(rows, width),
            g: AccMatrix::new(rows, width, vec![0; rows * width], 1.0)?,
        })
    }

    fn absorb_block(&mut self, block: &AccMatrix, start_col: usize) -> Result<()> {
        if self.lanes.absorbed() == 0 {
            self.g = AccMatrix::new(
                self.g.rows(),
                self.g.cols(),
                self.g.values().to_vec(),
                block.scale(),
            )?;
        } else if block.scale() != self.g.scale() {
            return Err(Error::shape("G block scale", self.g.scale(), block.scale()));
        }
        for c in 0..block.cols() {
            self.lanes.absorb_column(&block.column(c), start_col + c)?;
        }
        self.g.set_col_block(start_col, block);
        Ok(())
    }

    fn finish(
        self,
        gamma: &QuantTensor,
        beta: &QuantTensor,
        out: QuantParams,
    ) -> Result<QuantTensor> {
        let stats = self.lanes.finalize()?;
        let mut values = Vec::with_capacity(self.g.values().len());
        for (r, st) in stats.into_iter().enumerate() {
            values.extend(normalize_output(
                self.g.row(r),
                st,
                inv_sqrt(st.var),
                gamma,
                beta,
                out,
            )?);
        }
        QuantTensor::new(self.g.rows(), self.g.cols(), values, out)
    }
}

fn logit_scale() -> f64 {
    f64::from(1u32 << LOGIT_FRAC).recip()
}

/// Runs the MHA ResBlock through the fixed-point datapath.
#[allow(clippy::too_many_arguments)]
pub fn run_mha(
    cfg: &ModelConfig,
    weights: &QuantResBlockWeights,
    scales: &MhaScales,
    q: &QuantTensor,
    k: &QuantTensor,
    v: &QuantTensor,
    mask: &MaskMatrix,
    timing: &SaTiming,
) -> Result<(QuantTensor, CycleReport)> {
    let (s, d) = (cfg.seq_len(), cfg.d_model());
    weights.validate(cfg)?;
    expect_shape("MHA input Q", q, s, d)?;
    expect_shape("MHA input K", k, s, d)?;
    expect_shape("MHA input V", v, s, d)?;
    if mask.size() != s {
        return Err(Error::shape("mask size", s, mask.size()));
    }

    let plan = plan_mha(cfg);
    let report = build_report(&plan, timing)?;

    let mut temp1: Option<QuantTensor> = None;
    let mut temp2t: Option<QuantTensor> = None;
    let mut temp2: Option<QuantTensor> = None;
    let mut logits = AccMatrix::new(s, s, vec![0; s * s], logit_scale())?;
    let mut probs: Option<ProbMatrix> = None;
    let mut head_outputs: Vec<QuantTensor> = Vec::with_capacity(cfg.heads());
    let mut p: Option<QuantTensor> = None;
    let mut ln = LayerNormStage::new(s, d)?;

    let missing = |what: &str| Error::InvalidConfig(format!("plan order: {what} not available"));

    for (idx, pass) in plan.passes.iter().enumerate() {
        let head = pass.head.map(|i| &weights.heads[i]);
        let result = match pass.kind {
            PassKind::Qproj | PassKind::Kproj | PassKind::Vproj => {
                let h = head.ok_or_else(|| missing("head"))?;
                let (input, w, b, out) = match pass.kind {
                    PassKind::Qproj => (q, &h.w_q, &h.b_q, scales.q_proj),
                    PassKind::Kproj => (k, &h.w_k, &h.b_k, scales.k_proj),
                    _ => (v, &h.w_v, &h.b_v, scales.v_proj),
                };
                let ops = PassOperands {
                    weight: w,
                    bias: Some(b),
                    residual: None,
                    out: Some(out),
                };
                let r = run_pass(input, ops, pass, timing)?;
                let t = r.out.clone().expect("output scale supplied");
                match pass.kind {
                    PassKind::Qproj => temp1 = Some(t),
                    PassKind::Kproj => temp2t = Some(t.transpose()),
                    _ => temp2 = Some(t),
                }
                r
            }
            PassKind::Qkt => {
                let t1 = temp1.as_ref().ok_or_else(|| missing("query projection"))?;
                let t2t = temp2t.as_ref().ok_or_else(|| missing("key projection"))?;
                let a = t1.row_block(pass.input.rows.start, pass.input.rows.len);
                let w = cols_of(t2t, &pass.weight);
                let ops = PassOperands {
                    weight: &w,
                    bias: None,
                    residual: None,
                    out: None,
                };
                let r = run_pass(&a, ops, pass, timing)?;
                let tile = rescale_acc(&r.acc, logit_scale())?;
                let mut full = logits.values().to_vec();
                for row in 0..tile.rows() {
                    let dst = (pass.output.rows.start + row) * s + pass.output.cols.start;
                    full[dst..dst + tile.cols()].copy_from_slice(tile.row(row));
                }
                logits = AccMatrix::new(s, s, full, logit_scale())?;
                let last_sub = plan
                    .passes
                    .get(idx + 1)
                    .is_none_or(|n| n.kind != PassKind::Qkt);
                if last_sub {
                    probs = Some(scaled_masked_softmax(&logits, mask)?);
                }
                r
            }
            PassKind::Av => {
                let a = probs.take().ok_or_else(|| missing("softmax output"))?;
                let w = temp2.as_ref().ok_or_else(|| missing("value projection"))?;
                let ops = PassOperands {
                    weight: w,
                    bias: None,
                    residual: None,
                    out: Some(scales.attention),
                };
                let r = run_pass(&a, ops, pass, timing)?;
                head_outputs.push(r.out.clone().expect("output scale supplied"));
                r
            }
            PassKind::OutProjBlock => {
                if p.is_none() {
                    p = Some(QuantTensor::hconcat(&head_outputs)?);
                }
                let p = p.as_ref().expect("concatenated above");
                let w = cols_of(&weights.w_g, &pass.weight);
                let b = cols_of(&weights.b_g, pass.bias.as_ref().expect("bias tile"));
                let res = cols_of(q, pass.residual.as_ref().expect("residual tile"));
                let ops = PassOperands {
                    weight: &w,
                    bias: Some(&b),
                    residual: Some(&res),
                    out: None,
                };
                let r = run_pass(p, ops, pass, timing)?;
                ln.absorb_block(&r.acc, pass.output.cols.start)?;
                r
            }
            PassKind::Ffn1Block | PassKind::Ffn2Block => {
                return Err(Error::InvalidConfig("FFN pass in an MHA plan".into()))
            }
        };
        debug_assert_eq!(result.cycles, report.per_pass[idx].cycles);
    }
    debug_assert_eq!(head_outputs.len(), cfg.heads());
    let out = ln.finish(&weights.gamma, &weights.beta, scales.output)?;
    Ok((out, report))
}

/// Runs the FFN ResBlock through the fixed-point datapath.
pub fn run_ffn(
    cfg: &ModelConfig,
    weights: &QuantResBlockWeights,
    scales: &FfnScales,
    x: &QuantTensor,
    timing: &SaTiming,
) -> Result<(QuantTensor, CycleReport)> {
    let (s, d) = (cfg.seq_len(), cfg.d_model());
    weights.validate(cfg)?;
    expect_shape("FFN input X", x, s, d)?;

    let plan = plan_ffn(cfg);
    let report = build_report(&plan, timing)?;
    let mut hidden_blocks: Vec<QuantTensor> = Vec::with_capacity(cfg.d_ff() / HEAD_DIM);
    let mut hidden: Option<QuantTensor> = None;
    let mut ln = LayerNormStage::new(s, d)?;

    for (idx, pass) in plan.passes.iter().enumerate() {
        let w = cols_of(
            match pass.kind {
                PassKind::Ffn1Block => &weights.w_1,
                PassKind::Ffn2Block => &weights.w_2,
                _ => return Err(Error::InvalidConfig("MHA pass in an FFN plan".into())),
            },
            &pass.weight,
        );
        let result = if pass.kind == PassKind::Ffn1Block {
            let b = cols_of(&weights.b_1, pass.bias.as_ref().expect("bias tile"));
            let ops = PassOperands {
                weight: &w,
                bias: Some(&b),
                residual: None,
                out: Some(scales.hidden),
            };
            let r = run_pass(x, ops, pass, timing)?;
            hidden_blocks.push(r.out.clone().expect("output scale supplied"));
            r
        } else {
            if hidden.is_none() {
                hidden = Some(QuantTensor::hconcat(&hidden_blocks)?);
            }
            let b = cols_of(&weights.b_2, pass.bias.as_ref().expect("bias tile"));
            let res = cols_of(x, pass.residual.as_ref().expect("residual tile"));
            let ops = PassOperands {
                weight: &w,
                bias: Some(&b),
                residual: Some(&res),
                out: None,
            };
            let r = run_pass(hidden.as_ref().expect("built above"), ops, pass, timing)?;
            ln.absorb_block(&r.acc, pass.output.cols.start)?;
            r
        };
        debug_assert_eq!(result.cycles, report.per_pass[idx].cycles);
    }
    let out = ln.finish(&weights.gamma, &weights.beta, scales.output)?;
    Ok((out, report))
}
