//! Min-max calibration of weight and activation scales.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::plan::ModelConfig;
use crate::quant::{dequantize, quantize, QuantParams, QuantTensor, QMAX};
use crate::reference::{ref_ffn_trace, ref_mha_trace, ResBlockWeights};
use crate::scheduler::{FfnScales, MhaScales, QuantHeadWeights, QuantResBlockWeights};
use crate::softmax::MaskMatrix;

/// One MHA calibration sample: `Q`, `K`, `V` and the mask.
pub type MhaSample = (Matrix, Matrix, Matrix, MaskMatrix);

/// `max|x| / 127`; an all-zero tensor gets `1/127`.
pub fn minmax_scale(max_abs: f64) -> Result<QuantParams> {
    if !max_abs.is_finite() {
        return Err(Error::InvalidScale(max_abs));
    }
    let m = if max_abs > 0.0 { max_abs } else { 1.0 };
    QuantParams::new(m / f64::from(QMAX))
}

pub fn scale_for(m: &Matrix) -> Result<QuantParams> {
    minmax_scale(m.max_abs())
}

/// Quantizes with the tensor's own min-max scale.
pub fn quantize_auto(m: &Matrix) -> Result<QuantTensor> {
    quantize(m, scale_for(m)?)
}

fn quantize_vec(v: &[f64]) -> Result<QuantTensor> {
    quantize_auto(&Matrix::row_vector(v))
}

pub fn quantize_weights(w: &ResBlockWeights, cfg: &ModelConfig) -> Result<QuantResBlockWeights> {
    w.validate(cfg)?;
    let heads = w
        .heads
        .iter()
        .map(|h| {
            Ok(QuantHeadWeights {
                w_q: quantize_auto(&h.w_q)?,
                w_k: quantize_auto(&h.w_k)?,
                w_v: quantize_auto(&h.w_v)?,
                b_q: quantize_vec(&h.b_q)?,
                b_k: quantize_vec(&h.b_k)?,
                b_v: quantize_vec(&h.b_v)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QuantResBlockWeights {
        heads,
        w_g: quantize_auto(&w.w_g)?,
        b_g: quantize_vec(&w.b_g)?,
        w_1: quantize_auto(&w.w_1)?,
        b_1: quantize_vec(&w.b_1)?,
        w_2: quantize_auto(&w.w_2)?,
        b_2: quantize_vec(&w.b_2)?,
        gamma: quantize_vec(&w.gamma)?,
        beta: quantize_vec(&w.beta)?,
    })
}

/// Activation scales from the `f64` reference run on the dequantized
/// weights and inputs, maximised over the batch.
pub fn calibrate_mha(weights: &QuantResBlockWeights, samples: &[MhaSample]) -> Result<MhaScales> {
    if samples.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let w = weights.dequantize();
    let mut m = [0.0f64; 5];
    for (q, k, v, mask) in samples {
        let t = ref_mha_trace(q, k, v, &w, mask)?;
        for h in &t.heads {
            m[0] = m[0].max(h.q_proj.max_abs());
            m[1] = m[1].max(h.k_proj.max_abs());
            m[2] = m[2].max(h.v_proj.max_abs());
        }
        m[3] = m[3].max(t.p.max_abs());
        m[4] = m[4].max(t.out.max_abs());
    }
    Ok(MhaScales {
        q_proj: minmax_scale(m[0])?,
        k_proj: minmax_scale(m[1])?,
        v_proj: minmax_scale(m[2])?,
        attention: minmax_scale(m[3])?,
        output: minmax_scale(m[4])?,
    })
}

pub fn calibrate_ffn(weights: &QuantResBlockWeights, samples: &[Matrix]) -> Result<FfnScales> {
    if samples.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let w = weights.dequantize();
    let (mut hidden, mut out) = (0.0f64, 0.0f64);
    for x in samples {
        let t = ref_ffn_trace(x, &w)?;
        hidden = hidden.max(t.hidden.max_abs());
        out = out.max(t.out.max_abs());
    }
    Ok(FfnScales {
        hidden: minmax_scale(hidden)?,
        output: minmax_scale(out)?,
    })
}

/// Round-trips an input through INT8 so the reference sees exactly what
/// the datapath sees.
pub fn snap(m: &Matrix, params: QuantParams) -> Result<(QuantTensor, Matrix)> {
    let q = quantize(m, params)?;
    let back = dequantize(&q);
    Ok((q, back))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::{random_activations, random_weights};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_tensor_gets_floor_scale() {
        let p = scale_for(&Matrix::zeros(3, 3)).unwrap();
        assert_eq!(p.scale(), 1.0 / 127.0);
    }

    #[test]
    fn max_maps_to_full_scale() {
        let m = Matrix::from_vec(1, 3, vec![-2.0, 0.5, 1.0]).unwrap();
        let q = quantize_auto(&m).unwrap();
        assert_eq!(q.values(), &[-127, 32, 64]);
    }

    #[test]
    fn max_of_1_27_gives_scale_0_01() {
        let m = Matrix::from_vec(1, 2, vec![1.27, -0.5]).unwrap();
        assert!((scale_for(&m).unwrap().scale() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn non_finite_is_rejected() {
        assert!(minmax_scale(f64::NAN).is_err());
    }

    #[test]
    fn empty_batch_is_rejected() {
        let cfg = ModelConfig::new(64, 256, 1, 4).unwrap();
        let w = random_weights(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        let qw = quantize_weights(&w, &cfg).unwrap();
        assert_eq!(calibrate_mha(&qw, &[]), Err(Error::EmptyCalibration));
        assert_eq!(calibrate_ffn(&qw, &[]), Err(Error::EmptyCalibration));
    }

    #[test]
    fn weight_error_within_half_lsb() {
        let cfg = ModelConfig::new(64, 256, 1, 4).unwrap();
        let w = random_weights(&cfg, &mut ChaCha8Rng::seed_from_u64(5));
        let qw = quantize_weights(&w, &cfg).unwrap();
        let back = qw.dequantize();
        let half = qw.w_1.scale() / 2.0 + 1e-15;
        for (a, b) in w.w_1.as_slice().iter().zip(back.w_1.as_slice()) {
            assert!((a - b).abs() <= half);
        }
        qw.validate(&cfg).unwrap();
    }

    #[test]
    fn calibrated_scales_cover_the_batch() {
        let cfg = ModelConfig::new(64, 256, 1, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let qw = quantize_weights(&random_weights(&cfg, &mut rng), &cfg).unwrap();
        let xs: Vec<Matrix> = (0..3)
            .map(|_| random_activations(4, 64, &mut rng))
            .collect();
        let sc = calibrate_ffn(&qw, &xs).unwrap();
        let w = qw.dequantize();
        for x in &xs {
            let t = ref_ffn_trace(x, &w).unwrap();
            assert!(t.out.max_abs() <= sc.output.scale() * 127.0 + 1e-12);
        }
    }
}
