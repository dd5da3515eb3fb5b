//! Model presets and the partition of both ResBlocks into `s x 64` array
//! passes.
//!
//! Every Transformer variant of interest satisfies `d_model = 64 h` and
//! `d_ff = 4 d_model`, so `W_G` splits into `h` column blocks, `W_1` into
//! `4h` and `W_2` into `h`, each `k x 64`. Per-head projections are already
//! `d_model x 64`. The only awkward product is `Q_i K_i^T` (`s x s`), which
//! runs with idle columns when `s <= 64` and as row-group/column-chunk
//! sub-passes otherwise.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `d_k`, also the column count of the processing-element array.
pub const HEAD_DIM: usize = 64;
pub const SA_COLS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    TransformerBase,
    TransformerBig,
    BertBase,
    BertLarge,
}

impl Preset {
    pub const ALL: [Preset; 4] = [
        Preset::TransformerBase,
        Preset::TransformerBig,
        Preset::BertBase,
        Preset::BertLarge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::TransformerBase => "transformer-base",
            Preset::TransformerBig => "transformer-big",
            Preset::BertBase => "bert-base",
            Preset::BertLarge => "bert-large",
        }
    }

    /// `(d_model, d_ff, h)`.
    pub fn dims(self) -> (usize, usize, usize) {
        match self {
            Preset::TransformerBase => (512, 2048, 8),
            Preset::TransformerBig => (1024, 4096, 16),
            Preset::BertBase => (768, 3072, 12),
            Preset::BertLarge => (1024, 4096, 16),
        }
    }

    pub fn config(self, s: usize) -> Result<ModelConfig> {
        let (d_model, d_ff, h) = self.dims();
        ModelConfig::new(d_model, d_ff, h, s)
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown preset `{s}`")))
    }
}

/// `(d_model, d_ff, h, s)` with batch size fixed at 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    d_model: usize,
    d_ff: usize,
    heads: usize,
    seq_len: usize,
}

impl ModelConfig {
    pub fn new(d_model: usize, d_ff: usize, heads: usize, seq_len: usize) -> Result<Self> {
        if heads == 0 {
            return Err(Error::InvalidConfig("h must be at least 1".into()));
        }
        if d_model != HEAD_DIM * heads {
            return Err(Error::InvalidConfig(format!(
                "d_model ({d_model}) must equal 64 * h ({})",
                HEAD_DIM * heads
            )));
        }
        if d_ff != 4 * d_model {
            return Err(Error::InvalidConfig(format!(
                "d_ff ({d_ff}) must equal 4 * d_model ({})",
                4 * d_model
            )));
        }
        if seq_len == 0 {
            return Err(Error::InvalidConfig("s must be at least 1".into()));
        }
        Ok(Self {
            d_model,
            d_ff,
            heads,
            seq_len,
        })
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn d_ff(&self) -> usize {
        self.d_ff
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn d_k(&self) -> usize {
        HEAD_DIM
    }

    pub fn batch(&self) -> usize {
        1
    }

    /// Preset whose dimensions match, if any.
    pub fn preset(&self) -> Option<Preset> {
        Preset::ALL
            .into_iter()
            .find(|p| p.dims() == (self.d_model, self.d_ff, self.heads))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PassKind {
    Qproj,
    Kproj,
    Qkt,
    Vproj,
    Av,
    OutProjBlock,
    Ffn1Block,
    Ffn2Block,
}

impl PassKind {
    pub fn name(self) -> &'static str {
        match self {
            PassKind::Qproj => "Qproj",
            PassKind::Kproj => "Kproj",
            PassKind::Qkt => "QKT",
            PassKind::Vproj => "Vproj",
            PassKind::Av => "AV",
            PassKind::OutProjBlock => "OutProjBlock",
            PassKind::Ffn1Block => "FFN1Block",
            PassKind::Ffn2Block => "FFN2Block",
        }
    }
}

/// Named operands a pass reads from or writes to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "tensor", content = "head")]
pub enum TensorId {
    Q,
    K,
    V,
    X,
    Wq(usize),
    Wk(usize),
    Wv(usize),
    Bq(usize),
    Bk(usize),
    Bv(usize),
    Wg,
    Bg,
    W1,
    B1,
    W2,
    B2,
    /// Per-head query projection.
    Temp1,
    /// Per-head key projection, transposed (`64 x s`).
    Temp2T,
    /// Per-head value projection.
    Temp2,
    /// Softmax output of the current head.
    Probs,
    /// Concatenated head outputs, or the FFN hidden activation.
    P,
    /// Pre-LayerNorm sum.
    G,
    /// `Q_i K_i^T` logits of the current head.
    Logits,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

impl Span {
    pub fn new(start: usize, len: usize) -> Self {
        Self { start, len }
    }

    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

/// A rectangular window of a named tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileRef {
    pub tensor: TensorId,
    pub rows: Span,
    pub cols: Span,
}

impl TileRef {
    pub fn new(tensor: TensorId, rows: Span, cols: Span) -> Self {
        Self { tensor, rows, cols }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GemmPass {
    pub id: usize,
    pub kind: PassKind,
    pub head: Option<usize>,
    /// Column block index for OutProj/FFN blocks, sub-pass index for QKT.
    pub block: usize,
    /// Active array rows.
    pub rows: usize,
    /// Contraction length `k`, one input vector streamed per cycle.
    pub stream_len: usize,
    pub out_cols: usize,
    pub input: TileRef,
    pub weight: TileRef,
    pub bias: Option<TileRef>,
    pub residual: Option<TileRef>,
    pub output: TileRef,
    pub relu: bool,
    pub feeds_softmax: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "strategy")]
pub enum QktStrategy {
    /// One pass with `64 - s` idle output columns.
    ZeroPad { idle_cols: usize },
    /// `groups` row groups of `Q_i`, each producing `groups` column chunks.
    SplitRows { groups: usize },
}

impl QktStrategy {
    pub fn sub_passes(&self) -> usize {
        match *self {
            QktStrategy::ZeroPad { .. } => 1,
            QktStrategy::SplitRows { groups } => groups * groups,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    Mha,
    Ffn,
}

impl Block {
    pub fn name(self) -> &'static str {
        match self {
            Block::Mha => "mha",
            Block::Ffn => "ffn",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub block: Block,
    pub config: ModelConfig,
    pub qkt_strategy: QktStrategy,
    pub passes: Vec<GemmPass>,
}

impl PartitionPlan {
    /// Sum of contraction lengths: the cycle count if nothing but operand
    /// streaming took time.
    pub fn streaming_lower_bound(&self) -> u64 {
        self.passes.iter().map(|p| p.stream_len as u64).sum()
    }

    pub fn passes_of(&self, kind: PassKind) -> impl Iterator<Item = &GemmPass> {
        self.passes.iter().filter(move |p| p.kind == kind)
    }
}

pub fn plan_qkt(s: usize) -> QktStrategy {
    if s <= SA_COLS {
        QktStrategy::ZeroPad {
            idle_cols: SA_COLS - s,
        }
    } else {
        QktStrategy::SplitRows {
            groups: s.div_ceil(SA_COLS),
        }
    }
}

fn chunks(total: usize, width: usize) -> impl Iterator<Item = Span> {
    (0..total.div_ceil(width)).map(move |i| Span::new(i * width, width.min(total - i * width)))
}

struct Builder {
    passes: Vec<GemmPass>,
}

impl Builder {
    #[allow(clippy::too_many_arguments)]
    fn push(
        &mut self,
        kind: PassKind,
        head: Option<usize>,
        block: usize,
        input: TileRef,
        weight: TileRef,
        bias: Option<TileRef>,
        residual: Option<TileRef>,
        output: TileRef,
    ) {
        self.passes.push(GemmPass {
            id: self.passes.len(),
            kind,
            head,
            block,
            rows: input.rows.len,
            stream_len: input.cols.len,
            out_cols: weight.cols.len,
            input,
            weight,
            bias,
            residual,
            output,
            relu: kind == PassKind::Ffn1Block,
            feeds_softmax: kind == PassKind::Qkt,
        });
    }
}

pub fn plan_mha(cfg: &ModelConfig) -> PartitionPlan {
    let s = cfg.seq_len();
    let d = cfg.d_model();
    let all = |n| Span::new(0, n);
    let head_cols = all(HEAD_DIM);
    let strategy = plan_qkt(s);
    let mut b = Builder { passes: Vec::new() };
    for i in 0..cfg.heads() {
        let proj = |kind, src, w, bias| {
            (
                kind,
                TileRef::new(src, all(s), all(d)),
                TileRef::new(w, all(d), head_cols),
                TileRef::new(bias, all(1), head_cols),
            )
        };
        let (kind, input, weight, bias) = proj(
            PassKind::Qproj,
            TensorId::Q,
            TensorId::Wq(i),
            TensorId::Bq(i),
        );
        b.push(
            kind,
            Some(i),
            0,
            input,
            weight,
            Some(bias),
            None,
            TileRef::new(TensorId::Temp1, all(s), head_cols),
        );
        let (kind, input, weight, bias) = proj(
            PassKind::Kproj,
            TensorId::K,
            TensorId::Wk(i),
            TensorId::Bk(i),
        );
        b.push(
            kind,
            Some(i),
            0,
            input,
            weight,
            Some(bias),
            None,
            TileRef::new(TensorId::Temp2T, head_cols, all(s)),
        );
        let (row_width, col_width) = match strategy {
            QktStrategy::ZeroPad { .. } => (s, s),
            QktStrategy::SplitRows { .. } => (SA_COLS, SA_COLS),
        };
        let mut sub = 0;
        for rows in chunks(s, row_width) {
            for cols in chunks(s, col_width) {
                b.push(
                    PassKind::Qkt,
                    Some(i),
                    sub,
                    TileRef::new(TensorId::Temp1, rows, head_cols),
                    TileRef::new(TensorId::Temp2T, head_cols, cols),
                    None,
                    None,
                    TileRef::new(TensorId::Logits, rows, cols),
                );
                sub += 1;
            }
        }
        let (kind, input, weight, bias) = proj(
            PassKind::Vproj,
            TensorId::V,
            TensorId::Wv(i),
            TensorId::Bv(i),
        );
        b.push(
            kind,
            Some(i),
            0,
            input,
            weight,
            Some(bias),
            None,
            TileRef::new(TensorId::Temp2, all(s), head_cols),
        );
        b.push(
            PassKind::Av,
            Some(i),
            0,
            TileRef::new(TensorId::Probs, all(s), all(s)),
            TileRef::new(TensorId::Temp2, all(s), head_cols),
            None,
            None,
            TileRef::new(TensorId::P, all(s), Span::new(i * HEAD_DIM, HEAD_DIM)),
        );
    }
    for i in 0..cfg.heads() {
        let cols = Span::new(i * HEAD_DIM, HEAD_DIM);
        b.push(
            PassKind::OutProjBlock,
            None,
            i,
            TileRef::new(TensorId::P, all(s), all(d)),
            TileRef::new(TensorId::Wg, all(d), cols),
            Some(TileRef::new(TensorId::Bg, all(1), cols)),
            Some(TileRef::new(TensorId::Q, all(s), cols)),
            TileRef::new(TensorId::G, all(s), cols),
        );
    }
    PartitionPlan {
        block: Block::Mha,
        config: *cfg,
        qkt_strategy: strategy,
        passes: b.passes,
    }
}

pub fn plan_ffn(cfg: &ModelConfig) -> PartitionPlan {
    let s = cfg.seq_len();
    let (d, f) = (cfg.d_model(), cfg.d_ff());
    let all = |n| Span::new(0, n);
    let mut b = Builder { passes: Vec::new() };
    for i in 0..f / HEAD_DIM {
        let cols = Span::new(i * HEAD_DIM, HEAD_DIM);
        b.push(
            PassKind::Ffn1Block,
            None,
            i,
            TileRef::new(TensorId::X, all(s), all(d)),
            TileRef::new(TensorId::W1, all(d), cols),
            Some(TileRef::new(TensorId::B1, all(1), cols)),
            None,
            TileRef::new(TensorId::P, all(s), cols),
        );
    }
    for i in 0..cfg.heads() {
        let cols = Span::new(i * HEAD_DIM, HEAD_DIM);
        b.push(
            PassKind::Ffn2Block,
            None,
            i,
            TileRef::new(TensorId::P, all(s), all(f)),
            TileRef::new(TensorId::W2, all(f), cols),
            Some(TileRef::new(TensorId::B2, all(1), cols)),
            Some(TileRef::new(TensorId::X, all(s), cols)),
            TileRef::new(TensorId::G, all(s), cols),
        );
    }
    PartitionPlan {
        block: Block::Ffn,
        config: *cfg,
        qkt_strategy: plan_qkt(s),
        passes: b.passes,
    }
}

/// Share of `Q_i K_i^T` multiplications in the whole MHA ResBlock, in the
/// simplified closed form `s / (s + 256 h^2 + 64)`. Returned as
/// `(numerator, denominator)`.
pub fn qkt_mult_ratio_parts(s: usize, h: usize) -> (u64, u64) {
    let (s, h) = (s as u64, h as u64);
    (s, s + 256 * h * h + 64)
}

pub fn qkt_mult_ratio(s: usize, h: usize) -> f64 {
    let (n, d) = qkt_mult_ratio_parts(s, h);
    n as f64 / d as f64
}

/// The same share from the unsimplified multiplication counts
/// (`s^2 64^2 h` over QKT + three projections + output projection + AV).
/// Agrees with [`qkt_mult_ratio`] exactly at `s = 64`.
pub fn qkt_mult_ratio_from_counts(s: usize, h: usize) -> f64 {
    let (s, h) = (s as f64, h as f64);
    let d = 64.0 * h;
    let qkt = s * s * 64.0 * 64.0 * h;
    let total = qkt + 3.0 * 64.0 * s * d * d * h + s * d.powi(3) + 64.0 * s.powi(3) * h;
    qkt / total
}
