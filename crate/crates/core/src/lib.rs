//! Functional and cycle-level model of a systolic-array accelerator for the
//! multi-head-attention (MHA) and feed-forward (FFN) ResBlocks of a
//! Transformer.
//!
//! The crate is organised bottom-up:
//!
//! * [`quant`]: symmetric INT8 tensors, INT32 accumulators, (re)quantization.
//! * [`reference`]: `f64` oracle for attention, softmax, LayerNorm and both ResBlocks.
//! * [`plan`]: model presets and the partition of every GEMM into `s x 64` array passes.
//! * [`systolic`]: the processing-element array, one pass at a time, with cycle accounting.
//! * [`softmax`]: multiplier-free fixed-point scaled masked-softmax.
//! * [`layernorm`]: streaming one-pass LayerNorm with a lookup-table inverse square root.
//! * [`scheduler`]: the end-to-end computation flow and its [`CycleReport`].
//! * [`calibrate`], [`bundle`], [`report`]: calibration, the weight file format and run reports.

pub mod bundle;
pub mod calibrate;
pub mod error;
pub mod layernorm;
pub mod matrix;
pub mod plan;
pub mod quant;
pub mod reference;
pub mod report;
pub mod scheduler;
pub mod softmax;
pub mod systolic;
pub mod workload;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use plan::{GemmPass, ModelConfig, PartitionPlan, PassKind, Preset, QktStrategy};
pub use quant::{AccMatrix, QuantParams, QuantTensor};
pub use scheduler::{ActivationScales, CycleReport, FfnScales, MhaScales, QuantResBlockWeights};
pub use softmax::{MaskMatrix, ProbMatrix};
pub use systolic::SaTiming;
