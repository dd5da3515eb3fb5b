//! Run reports and the end-to-end simulation driver shared by the CLI,
//! benches and tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bundle::WeightBundle;
use crate::calibrate::{calibrate_ffn, calibrate_mha, quantize_weights, scale_for, snap};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::plan::{plan_ffn, plan_mha};
use crate::plan::{Block, ModelConfig, Preset};
use crate::quant::QuantTensor;
use crate::reference::{ref_ffn_resblock, ref_mha_resblock};
use crate::scheduler::{
    build_report, check_overlap, derive_latency, run_ffn, run_mha, CycleReport, LayerNormWindow,
    OverlapViolation, RunStatus, SoftmaxWindow,
};
use crate::softmax::MaskMatrix;
use crate::systolic::{PassTrace, SaTiming};
use crate::workload::{random_activations, random_mask, random_weights};

/// Published cycle count of the reference design, transformer-base at
/// `s = 64`, MHA ResBlock.
pub const TARGET_MHA_CYCLES: u64 = 21_344;
/// Same for the FFN ResBlock.
pub const TARGET_FFN_CYCLES: u64 = 42_099;
/// Clock of the reference design.
pub const TARGET_CLOCK_HZ: f64 = 200e6;
/// Reference design latencies in microseconds at [`TARGET_CLOCK_HZ`].
pub const TARGET_MHA_LATENCY_US: f64 = 106.7;
pub const TARGET_FFN_LATENCY_US: f64 = 210.5;
/// GPU latencies of the same ResBlocks in microseconds.
pub const GPU_MHA_LATENCY_US: f64 = 1557.8;
pub const GPU_FFN_LATENCY_US: f64 = 713.4;
/// Speed-ups of the reference design over the GPU.
pub const TARGET_MHA_SPEEDUP: f64 = 14.6;
pub const TARGET_FFN_SPEEDUP: f64 = 3.4;

/// Relative tolerance on cycle counts against the reference design.
pub const CYCLE_TOLERANCE: f64 = 0.05;

pub fn target_cycles(block: Block) -> u64 {
    match block {
        Block::Mha => TARGET_MHA_CYCLES,
        Block::Ffn => TARGET_FFN_CYCLES,
    }
}

pub fn gpu_latency_us(block: Block) -> f64 {
    match block {
        Block::Mha => GPU_MHA_LATENCY_US,
        Block::Ffn => GPU_FFN_LATENCY_US,
    }
}

/// Whether `cfg` is the configuration the reference numbers were measured on.
pub fn is_target_config(cfg: &ModelConfig) -> bool {
    cfg.preset() == Some(Preset::TransformerBase) && cfg.seq_len() == 64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    None,
    Causal,
    /// Random with the diagonal kept legal.
    Random,
}

impl MaskKind {
    pub fn build(self, s: usize, rng: &mut ChaCha8Rng) -> MaskMatrix {
        match self {
            MaskKind::None => MaskMatrix::unmasked(s),
            MaskKind::Causal => MaskMatrix::causal(s),
            MaskKind::Random => random_mask(s, 0.3, rng),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracySummary {
    /// Largest `|out - reference|` in output LSBs.
    pub max_lsb: f64,
    pub mean_lsb: f64,
    pub elements: usize,
}

/// Error of an INT8 output against a real-valued reference, in units of
/// the output scale.
pub fn lsb_error(out: &QuantTensor, reference: &Matrix) -> Result<AccuracySummary> {
    if (out.rows(), out.cols()) != reference.shape() {
        return Err(Error::shape(
            "lsb_error",
            format!("{}x{}", reference.rows(), reference.cols()),
            format!("{}x{}", out.rows(), out.cols()),
        ));
    }
    let s = out.scale();
    let errs: Vec<f64> = out
        .values()
        .iter()
        .zip(reference.as_slice())
        .map(|(&q, &r)| (f64::from(q) - r / s).abs())
        .collect();
    let n = errs.len();
    Ok(AccuracySummary {
        max_lsb: errs.iter().copied().fold(0.0, f64::max),
        mean_lsb: if n == 0 {
            0.0
        } else {
            errs.iter().sum::<f64>() / n as f64
        },
        elements: n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub preset: Option<String>,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub seq_len: usize,
}

impl From<&ModelConfig> for ConfigEcho {
    fn from(cfg: &ModelConfig) -> Self {
        Self {
            preset: cfg.preset().map(|p| p.name().to_string()),
            d_model: cfg.d_model(),
            d_ff: cfg.d_ff(),
            heads: cfg.heads(),
            seq_len: cfg.seq_len(),
        }
    }
}

/// Comparison with the reference design; present only for its configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetComparison {
    pub target_cycles: u64,
    /// `(cycles - target) / target`.
    pub relative_delta: f64,
    pub within_tolerance: bool,
    pub gpu_latency_us: f64,
    pub speedup_vs_gpu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub block: Block,
    pub config: ConfigEcho,
    pub timing: SaTiming,
    pub seed: Option<u64>,
    pub clock_hz: f64,
    pub passes: Vec<PassTrace>,
    pub softmax_windows: Vec<SoftmaxWindow>,
    pub layernorm: LayerNormWindow,
    pub streaming_lower_bound: u64,
    pub total_cycles: u64,
    pub latency_us: f64,
    pub target: Option<TargetComparison>,
    pub accuracy: Option<AccuracySummary>,
    pub violations: Vec<OverlapViolation>,
    pub status: RunStatus,
}

impl RunReport {
    pub fn from_cycles(
        cycles: CycleReport,
        clock_hz: f64,
        seed: Option<u64>,
        accuracy: Option<AccuracySummary>,
    ) -> Result<Self> {
        let latency_us = derive_latency(cycles.total_cycles, clock_hz)? * 1e6;
        let target = is_target_config(&cycles.config).then(|| {
            let t = target_cycles(cycles.block);
            let delta = (cycles.total_cycles as f64 - t as f64) / t as f64;
            let gpu = gpu_latency_us(cycles.block);
            TargetComparison {
                target_cycles: t,
                relative_delta: delta,
                within_tolerance: delta.abs() <= CYCLE_TOLERANCE,
                gpu_latency_us: gpu,
                speedup_vs_gpu: gpu / latency_us,
            }
        });
        let violations = check_overlap(&cycles);
        Ok(Self {
            block: cycles.block,
            config: ConfigEcho::from(&cycles.config),
            timing: cycles.timing,
            seed,
            clock_hz,
            passes: cycles.per_pass,
            softmax_windows: cycles.softmax_windows,
            layernorm: cycles.layernorm,
            streaming_lower_bound: cycles.streaming_lower_bound,
            total_cycles: cycles.total_cycles,
            latency_us,
            target,
            accuracy,
            violations,
            status: cycles.status,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is always serialisable")
    }
}

/// Cycle accounting only; no values are computed.
pub fn timing_only(
    block: Block,
    cfg: &ModelConfig,
    timing: &SaTiming,
    clock_hz: f64,
) -> Result<RunReport> {
    let plan = match block {
        Block::Mha => plan_mha(cfg),
        Block::Ffn => plan_ffn(cfg),
    };
    RunReport::from_cycles(build_report(&plan, timing)?, clock_hz, None, None)
}

#[derive(Debug, Clone)]
pub struct SimOptions {
    pub block: Block,
    pub config: ModelConfig,
    pub timing: SaTiming,
    pub seed: u64,
    pub clock_hz: f64,
    pub mask: MaskKind,
    /// Pre-quantized weights; random ones from `seed` otherwise. Missing
    /// activation scales are calibrated on the generated input.
    pub bundle: Option<WeightBundle>,
}

impl SimOptions {
    pub fn new(block: Block, config: ModelConfig, seed: u64) -> Self {
        Self {
            block,
            config,
            timing: SaTiming::default(),
            seed,
            clock_hz: TARGET_CLOCK_HZ,
            mask: MaskKind::None,
            bundle: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub report: RunReport,
    pub output: QuantTensor,
    /// `f64` result on the dequantized weights and inputs.
    pub reference: Matrix,
}

/// Generates a seeded workload, runs it through the integer datapath and
/// scores it against the `f64` reference.
pub fn simulate(opts: &SimOptions) -> Result<SimOutput> {
    let cfg = &opts.config;
    let (s, d) = (cfg.seq_len(), cfg.d_model());
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let weights = match &opts.bundle {
        Some(b) => {
            if b.config != *cfg {
                return Err(Error::shape(
                    "weight bundle config",
                    format!("d_model {d}, h {}, s {s}", cfg.heads()),
                    format!(
                        "d_model {}, h {}, s {}",
                        b.config.d_model(),
                        b.config.heads(),
                        b.config.seq_len()
                    ),
                ));
            }
            b.weights.clone()
        }
        None => quantize_weights(&random_weights(cfg, &mut rng), cfg)?,
    };
    let real_weights = weights.dequantize();

    let (output, cycles, reference) = match opts.block {
        Block::Mha => {
            let snap_input = |rng: &mut ChaCha8Rng| {
                let m = random_activations(s, d, rng);
                snap(&m, scale_for(&m)?)
            };
            let (q, qr) = snap_input(&mut rng)?;
            let (k, kr) = snap_input(&mut rng)?;
            let (v, vr) = snap_input(&mut rng)?;
            let mask = opts.mask.build(s, &mut rng);
            let scales = match opts.bundle.as_ref().and_then(|b| b.mha_scales) {
                Some(sc) => sc,
                None => calibrate_mha(
                    &weights,
                    &[(qr.clone(), kr.clone(), vr.clone(), mask.clone())],
                )?,
            };
            let (out, cycles) = run_mha(cfg, &weights, &scales, &q, &k, &v, &mask, &opts.timing)?;
            let reference = ref_mha_resblock(&qr, &kr, &vr, &real_weights, &mask)?;
            (out, cycles, reference)
        }
        Block::Ffn => {
            let m = random_activations(s, d, &mut rng);
            let (x, xr) = snap(&m, scale_for(&m)?)?;
            let scales = match opts.bundle.as_ref().and_then(|b| b.ffn_scales) {
                Some(sc) => sc,
                None => calibrate_ffn(&weights, std::slice::from_ref(&xr))?,
            };
            let (out, cycles) = run_ffn(cfg, &weights, &scales, &x, &opts.timing)?;
            let reference = ref_ffn_resblock(&xr, &real_weights)?;
            (out, cycles, reference)
        }
    };
    let accuracy = lsb_error(&output, &reference)?;
    let report = RunReport::from_cycles(cycles, opts.clock_hz, Some(opts.seed), Some(accuracy))?;
    Ok(SimOutput {
        report,
        output,
        reference,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lsb_error_counts_units_of_scale() {
        let p = crate::quant::QuantParams::new(0.5).unwrap();
        let out = QuantTensor::new(1, 2, vec![2, -1], p).unwrap();
        let r = Matrix::from_vec(1, 2, vec![1.25, -0.5]).unwrap();
        let a = lsb_error(&out, &r).unwrap();
        assert!((a.max_lsb - 0.5).abs() < 1e-12);
        assert!((a.mean_lsb - 0.25).abs() < 1e-12);
    }

    #[test]
    fn target_comparison_only_for_base_64() {
        let cfg = Preset::TransformerBase.config(64).unwrap();
        let r = timing_only(Block::Mha, &cfg, &SaTiming::default(), TARGET_CLOCK_HZ).unwrap();
        assert!(r.target.as_ref().unwrap().within_tolerance);
        let cfg = Preset::TransformerBase.config(32).unwrap();
        let r = timing_only(Block::Mha, &cfg, &SaTiming::default(), TARGET_CLOCK_HZ).unwrap();
        assert!(r.target.is_none());
    }

    #[test]
    fn report_round_trips_through_json() {
        let cfg = ModelConfig::new(64, 256, 1, 4).unwrap();
        let out = simulate(&SimOptions::new(Block::Ffn, cfg, 3)).unwrap();
        let back: RunReport = serde_json::from_str(&out.report.to_json()).unwrap();
        assert_eq!(back, out.report);
    }

    #[test]
    fn bad_clock_is_rejected() {
        let cfg = ModelConfig::new(64, 256, 1, 4).unwrap();
        assert!(timing_only(Block::Ffn, &cfg, &SaTiming::default(), 0.0).is_err());
    }
}
