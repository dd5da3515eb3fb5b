//! Seeded fixtures shared by the datapath benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tfaccel_core::calibrate::{calibrate_ffn, calibrate_mha, quantize_auto, quantize_weights};
use tfaccel_core::quant::dequantize;
use tfaccel_core::workload::{random_activations, random_weights};
use tfaccel_core::{
    AccMatrix, FfnScales, MaskMatrix, MhaScales, ModelConfig, QuantResBlockWeights, QuantTensor,
};

/// Quantized weights, calibrated scales and one set of inputs.
pub struct Fixture {
    pub config: ModelConfig,
    pub weights: QuantResBlockWeights,
    pub mha_scales: MhaScales,
    pub ffn_scales: FfnScales,
    pub q: QuantTensor,
    pub k: QuantTensor,
    pub v: QuantTensor,
    pub x: QuantTensor,
    pub mask: MaskMatrix,
}

impl Fixture {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights =
            quantize_weights(&random_weights(&config, &mut rng), &config).expect("valid weights");
        let (s, d) = (config.seq_len(), config.d_model());
        let mut input =
            || quantize_auto(&random_activations(s, d, &mut rng)).expect("finite input");
        let (q, k, v, x) = (input(), input(), input(), input());
        let mask = MaskMatrix::causal(s);
        let sample = (dequantize(&q), dequantize(&k), dequantize(&v), mask.clone());
        let mha_scales = calibrate_mha(&weights, &[sample]).expect("non-empty batch");
        let ffn_scales = calibrate_ffn(&weights, &[dequantize(&x)]).expect("non-empty batch");
        Self {
            config,
            weights,
            mha_scales,
            ffn_scales,
            q,
            k,
            v,
            x,
            mask,
        }
    }
}

/// Random unscaled logits with 8 fraction bits, scaled values in [-8, 8].
pub fn random_logits(s: usize, seed: u64) -> AccMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = (0..s * s)
        .map(|_| rng.gen_range(-16_384..=16_384))
        .collect();
    AccMatrix::new(s, s, v, 1.0 / 256.0).expect("square grid")
}
