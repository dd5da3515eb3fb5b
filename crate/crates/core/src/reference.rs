//! Double-precision oracle for the attention head, masked softmax,
//! LayerNorm and both ResBlocks. Every fixed-point unit is validated
//! against these functions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::plan::{ModelConfig, HEAD_DIM};
use crate::softmax::MaskMatrix;

pub const LAYERNORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub b_q: Vec<f64>,
    pub b_k: Vec<f64>,
    pub b_v: Vec<f64>,
}

/// Parameters of one MHA ResBlock and one FFN ResBlock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResBlockWeights {
    pub heads: Vec<HeadWeights>,
    pub w_g: Matrix,
    pub b_g: Vec<f64>,
    pub w_1: Matrix,
    pub b_1: Vec<f64>,
    pub w_2: Matrix,
    pub b_2: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

fn check(context: &'static str, expected: (usize, usize), m: &Matrix) -> Result<()> {
    if m.shape() != expected {
        return Err(Error::shape(
            context,
            format!("{}x{}", expected.0, expected.1),
            format!("{}x{}", m.rows(), m.cols()),
        ));
    }
    Ok(())
}

fn check_len(context: &'static str, expected: usize, v: &[f64]) -> Result<()> {
    if v.len() != expected {
        return Err(Error::shape(context, expected, v.len()));
    }
    Ok(())
}

impl ResBlockWeights {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let (d, f) = (cfg.d_model(), cfg.d_ff());
        if self.heads.len() != cfg.heads() {
            return Err(Error::shape(
                "ResBlockWeights heads",
                cfg.heads(),
                self.heads.len(),
            ));
        }
        for h in &self.heads {
            check("W_Q", (d, HEAD_DIM), &h.w_q)?;
            check("W_K", (d, HEAD_DIM), &h.w_k)?;
            check("W_V", (d, HEAD_DIM), &h.w_v)?;
            check_len("Bias_Q", HEAD_DIM, &h.b_q)?;
            check_len("Bias_K", HEAD_DIM, &h.b_k)?;
            check_len("Bias_V", HEAD_DIM, &h.b_v)?;
        }
        check("W_G", (d, d), &self.w_g)?;
        check_len("Bias_G", d, &self.b_g)?;
        check("W_1", (d, f), &self.w_1)?;
        check_len("b_1", f, &self.b_1)?;
        check("W_2", (f, d), &self.w_2)?;
        check_len("b_2", d, &self.b_2)?;
        check_len("gamma", d, &self.gamma)?;
        check_len("beta", d, &self.beta)?;
        Ok(())
    }
}

/// Row-wise masked softmax of `logits / sqrt(d_k)`; masked entries are 0 and
/// excluded from the denominator.
pub fn ref_masked_softmax(logits: &Matrix, mask: &MaskMatrix) -> Result<Matrix> {
    let scale = (HEAD_DIM as f64).sqrt().recip();
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        let legal = mask.row(r);
        let max = logits
            .row(r)
            .iter()
            .zip(legal)
            .filter(|(_, &m)| !m)
            .map(|(&x, _)| x * scale)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::FullyMaskedRow { row: r });
        }
        let mut sum = 0.0;
        for (c, (&x, &m)) in logits.row(r).iter().zip(legal).enumerate() {
            if !m {
                let e = (x * scale - max).exp();
                out.set(r, c, e);
                sum += e;
            }
        }
        for v in out.row_mut(r) {
            *v /= sum;
        }
    }
    Ok(out)
}

/// Intermediates of one attention head.
#[derive(Debug, Clone)]
pub struct HeadTrace {
    pub q_proj: Matrix,
    pub k_proj: Matrix,
    pub v_proj: Matrix,
    pub logits: Matrix,
    pub probs: Matrix,
    pub out: Matrix,
}

fn project(x: &Matrix, w: &Matrix, b: &[f64]) -> Result<Matrix> {
    let mut y = x.matmul(w)?;
    y.add_row_bias(b);
    Ok(y)
}

pub fn ref_attention_head_trace(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    w: &HeadWeights,
    mask: &MaskMatrix,
) -> Result<HeadTrace> {
    if mask.size() != q.rows() || k.rows() != v.rows() || mask.size() != k.rows() {
        return Err(Error::shape(
            "attention head sequence length",
            q.rows(),
            format!("mask {} / keys {}", mask.size(), k.rows()),
        ));
    }
    let q_proj = project(q, &w.w_q, &w.b_q)?;
    let k_proj = project(k, &w.w_k, &w.b_k)?;
    let v_proj = project(v, &w.w_v, &w.b_v)?;
    let logits = q_proj.matmul(&k_proj.transpose())?;
    let probs = ref_masked_softmax(&logits, mask)?;
    let out = probs.matmul(&v_proj)?;
    Ok(HeadTrace {
        q_proj,
        k_proj,
        v_proj,
        logits,
        probs,
        out,
    })
}

pub fn ref_attention_head(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    w: &HeadWeights,
    mask: &MaskMatrix,
) -> Result<Matrix> {
    Ok(ref_attention_head_trace(q, k, v, w, mask)?.out)
}

/// LayerNorm of one row with population variance.
pub fn ref_layernorm_row(g: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let d = g.len() as f64;
    let mean = g.iter().sum::<f64>() / d;
    let var = g.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d;
    let inv = (var + LAYERNORM_EPS).sqrt().recip();
    g.iter()
        .zip(gamma.iter().zip(beta))
        .map(|(x, (ga, be))| (x - mean) * inv * ga + be)
        .collect()
}

/// Same statistics through `E[g^2] - E[g]^2`.
pub fn one_pass_variance(g: &[f64]) -> f64 {
    let d = g.len() as f64;
    let mean = g.iter().sum::<f64>() / d;
    let mean_sq = g.iter().map(|x| x * x).sum::<f64>() / d;
    mean_sq - mean * mean
}

pub fn ref_layernorm(g: &Matrix, gamma: &[f64], beta: &[f64]) -> Matrix {
    let mut out = Matrix::zeros(g.rows(), g.cols());
    for r in 0..g.rows() {
        out.row_mut(r)
            .copy_from_slice(&ref_layernorm_row(g.row(r), gamma, beta));
    }
    out
}

#[derive(Debug, Clone)]
pub struct MhaTrace {
    pub heads: Vec<HeadTrace>,
    /// Concatenated head outputs.
    pub p: Matrix,
    /// Pre-LayerNorm sum including the residual.
    pub g: Matrix,
    pub out: Matrix,
}

pub fn ref_mha_trace(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    w: &ResBlockWeights,
    mask: &MaskMatrix,
) -> Result<MhaTrace> {
    let d_model = w.w_g.rows();
    if q.cols() != d_model || k.cols() != d_model || v.cols() != d_model {
        return Err(Error::shape("MHA input width", d_model, q.cols()));
    }
    let heads = w
        .heads
        .iter()
        .map(|hw| ref_attention_head_trace(q, k, v, hw, mask))
        .collect::<Result<Vec<_>>>()?;
    let mut p = Matrix::zeros(q.rows(), d_model);
    for (i, h) in heads.iter().enumerate() {
        p.set_col_block(i * HEAD_DIM, &h.out);
    }
    let mut g = project(&p, &w.w_g, &w.b_g)?;
    g.add_assign(q);
    let out = ref_layernorm(&g, &w.gamma, &w.beta);
    Ok(MhaTrace { heads, p, g, out })
}

pub fn ref_mha_resblock(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    w: &ResBlockWeights,
    mask: &MaskMatrix,
) -> Result<Matrix> {
    Ok(ref_mha_trace(q, k, v, w, mask)?.out)
}

#[derive(Debug, Clone)]
pub struct FfnTrace {
    /// ReLU(X W_1 + b_1).
    pub hidden: Matrix,
    pub g: Matrix,
    pub out: Matrix,
}

pub fn ref_ffn_trace(x: &Matrix, w: &ResBlockWeights) -> Result<FfnTrace> {
    let hidden = project(x, &w.w_1, &w.b_1)?.map(|v| v.max(0.0));
    let mut g = project(&hidden, &w.w_2, &w.b_2)?;
    g.add_assign(x);
    let out = ref_layernorm(&g, &w.gamma, &w.beta);
    Ok(FfnTrace { hidden, g, out })
}

pub fn ref_ffn_resblock(x: &Matrix, w: &ResBlockWeights) -> Result<Matrix> {
    Ok(ref_ffn_trace(x, w)?.out)
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::workload;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type Grid = Vec<Vec<f64>>;

    fn grid(m: &Matrix) -> Grid {
        (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
    }

    // Naive oracle, written independently of Matrix.
    fn mm(a: &Grid, b: &Grid) -> Grid {
        let (n, k, m) = (a.len(), b.len(), b[0].len());
        let mut out = vec![vec![0.0; m]; n];
        for i in 0..n {
            for j in 0..m {
                let mut acc = 0.0;
                for t in 0..k {
                    acc += a[i][t] * b[t][j];
                }
                out[i][j] = acc;
            }
        }
        out
    }

    fn add_bias(a: &mut Grid, b: &[f64]) {
        for row in a.iter_mut() {
            for (v, bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
    }

    fn naive_head(q: &Grid, k: &Grid, v: &Grid, w: &HeadWeights, mask: &MaskMatrix) -> Grid {
        let mut qp = mm(q, &grid(&w.w_q));
        add_bias(&mut qp, &w.b_q);
        let mut kp = mm(k, &grid(&w.w_k));
        add_bias(&mut kp, &w.b_k);
        let mut vp = mm(v, &grid(&w.w_v));
        add_bias(&mut vp, &w.b_v);
        let s = q.len();
        let mut weights = vec![vec![0.0; s]; s];
        for i in 0..s {
            let mut scores = vec![0.0; s];
            for j in 0..s {
                for t in 0..64 {
                    scores[j] += qp[i][t] * kp[j][t];
                }
                scores[j] /= 8.0;
            }
            let mut denom = 0.0;
            for j in 0..s {
                if !mask.is_masked(i, j) {
                    denom += scores[j].exp();
                }
            }
            for j in 0..s {
                if !mask.is_masked(i, j) {
                    weights[i][j] = scores[j].exp() / denom;
                }
            }
        }
        mm(&weights, &vp)
    }

    fn naive_ln(g: &Grid, gamma: &[f64], beta: &[f64]) -> Grid {
        g.iter()
            .map(|row| {
                let n = row.len() as f64;
                let mean = row.iter().sum::<f64>() / n;
                let mut var = 0.0;
                for x in row {
                    var += (x - mean) * (x - mean);
                }
                var /= n;
                row.iter()
                    .enumerate()
                    .map(|(j, x)| (x - mean) / (var + 1e-8).sqrt() * gamma[j] + beta[j])
                    .collect()
            })
            .collect()
    }

    fn naive_mha(q: &Grid, k: &Grid, v: &Grid, w: &ResBlockWeights, mask: &MaskMatrix) -> Grid {
        let heads: Vec<Grid> = w
            .heads
            .iter()
            .map(|hw| naive_head(q, k, v, hw, mask))
            .collect();
        let p: Grid = (0..q.len())
            .map(|i| heads.iter().flat_map(|h| h[i].clone()).collect())
            .collect();
        let mut g = mm(&p, &grid(&w.w_g));
        add_bias(&mut g, &w.b_g);
        for (gr, qr) in g.iter_mut().zip(q) {
            for (a, b) in gr.iter_mut().zip(qr) {
                *a += b;
            }
        }
        naive_ln(&g, &w.gamma, &w.beta)
    }

    fn naive_ffn(x: &Grid, w: &ResBlockWeights) -> Grid {
        let mut h = mm(x, &grid(&w.w_1));
        add_bias(&mut h, &w.b_1);
        for row in h.iter_mut() {
            for v in row.iter_mut() {
                *v = v.max(0.0);
            }
        }
        let mut g = mm(&h, &grid(&w.w_2));
        add_bias(&mut g, &w.b_2);
        for (gr, xr) in g.iter_mut().zip(x) {
            for (a, b) in gr.iter_mut().zip(xr) {
                *a += b;
            }
        }
        naive_ln(&g, &w.gamma, &w.beta)
    }

    fn max_rel(a: &Matrix, b: &Grid) -> f64 {
        let mut worst: f64 = 0.0;
        for r in 0..a.rows() {
            for c in 0..a.cols() {
                let (x, y) = (a.get(r, c), b[r][c]);
                worst = worst.max((x - y).abs() / y.abs().max(1.0));
            }
        }
        worst
    }

    fn setup(
        h: usize,
        s: usize,
        seed: u64,
    ) -> (ModelConfig, ResBlockWeights, Matrix, Matrix, Matrix) {
        let cfg = ModelConfig::new(64 * h, 256 * h, h, s).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = workload::random_weights(&cfg, &mut rng);
        let q = workload::random_activations(s, cfg.d_model(), &mut rng);
        let k = workload::random_activations(s, cfg.d_model(), &mut rng);
        let v = workload::random_activations(s, cfg.d_model(), &mut rng);
        (cfg, w, q, k, v)
    }

    fn identity_head(d_model: usize) -> HeadWeights {
        let eye = Matrix::from_fn(d_model, 64, |r, c| if r == c { 1.0 } else { 0.0 });
        HeadWeights {
            w_q: eye.clone(),
            w_k: eye.clone(),
            w_v: eye,
            b_q: vec![0.0; 64],
            b_k: vec![0.0; 64],
            b_v: vec![0.0; 64],
        }
    }

    #[test]
    fn single_position_attends_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = workload::random_activations(1, 64, &mut rng);
        let out =
            ref_attention_head(&x, &x, &x, &identity_head(64), &MaskMatrix::unmasked(1)).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn identical_keys_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = 5;
        let q = workload::random_activations(s, 64, &mut rng);
        let krow = workload::random_activations(1, 64, &mut rng);
        let k = Matrix::from_fn(s, 64, |_, c| krow.get(0, c));
        let v = workload::random_activations(s, 64, &mut rng);
        let out =
            ref_attention_head(&q, &k, &v, &identity_head(64), &MaskMatrix::unmasked(s)).unwrap();
        for c in 0..64 {
            let mean = (0..s).map(|r| v.get(r, c)).sum::<f64>() / s as f64;
            for r in 0..s {
                assert!((out.get(r, c) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn head_matches_naive_oracle() {
        let (_, w, q, k, v) = setup(2, 4, 3);
        let mask = MaskMatrix::causal(4);
        let out = ref_attention_head(&q, &k, &v, &w.heads[1], &mask).unwrap();
        let naive = naive_head(&grid(&q), &grid(&k), &grid(&v), &w.heads[1], &mask);
        assert!(max_rel(&out, &naive) <= 1e-12);
    }

    #[test]
    fn fully_masked_row_rejected() {
        let logits = Matrix::zeros(2, 2);
        let mask = MaskMatrix::new(2, vec![false, true, false, false]).unwrap();
        assert!(ref_masked_softmax(&logits, &mask).is_ok());
        // MaskMatrix refuses to build a fully masked row, so the softmax path
        // can only see one through a mismatched mask.
        assert!(MaskMatrix::new(2, vec![true, true, false, false]).is_err());
    }

    #[test]
    fn zero_mha_is_zero() {
        let cfg = ModelConfig::new(64, 256, 1, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut w = workload::random_weights(&cfg, &mut rng);
        for h in &mut w.heads {
            h.w_q = Matrix::zeros(64, 64);
            h.w_k = Matrix::zeros(64, 64);
            h.w_v = Matrix::zeros(64, 64);
            h.b_q = vec![0.0; 64];
            h.b_k = vec![0.0; 64];
            h.b_v = vec![0.0; 64];
        }
        w.w_g = Matrix::zeros(64, 64);
        w.b_g = vec![0.0; 64];
        w.gamma = vec![1.0; 64];
        w.beta = vec![0.0; 64];
        let zero = Matrix::zeros(3, 64);
        let kv = workload::random_activations(3, 64, &mut rng);
        let out = ref_mha_resblock(&zero, &kv, &kv, &w, &MaskMatrix::unmasked(3)).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mha_with_one_head_and_position_reduces_to_head_plus_layernorm() {
        let (_, w, q, k, v) = setup(1, 1, 5);
        let mask = MaskMatrix::unmasked(1);
        let head = ref_attention_head(&q, &k, &v, &w.heads[0], &mask).unwrap();
        let mut g = head.matmul(&w.w_g).unwrap();
        g.add_row_bias(&w.b_g);
        g.add_assign(&q);
        let expected = ref_layernorm_row(g.row(0), &w.gamma, &w.beta);
        let got = ref_mha_resblock(&q, &k, &v, &w, &mask).unwrap();
        assert_eq!(got.row(0), expected.as_slice());
    }

    #[test]
    fn mha_base_shapes_match_naive_oracle() {
        let (_, w, q, k, v) = setup(8, 8, 6);
        let mask = MaskMatrix::causal(8);
        let out = ref_mha_resblock(&q, &k, &v, &w, &mask).unwrap();
        let naive = naive_mha(&grid(&q), &grid(&k), &grid(&v), &w, &mask);
        assert!(max_rel(&out, &naive) <= 1e-10);
    }

    #[test]
    fn ffn_base_shapes_match_naive_oracle() {
        let (_, w, x, _, _) = setup(8, 8, 7);
        let out = ref_ffn_resblock(&x, &w).unwrap();
        assert!(max_rel(&out, &naive_ffn(&grid(&x), &w)) <= 1e-10);
    }

    #[test]
    fn ffn_zero_weights_constant_row_gives_beta() {
        let cfg = ModelConfig::new(64, 256, 1, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut w = workload::random_weights(&cfg, &mut rng);
        w.w_1 = Matrix::zeros(64, 256);
        w.w_2 = Matrix::zeros(256, 64);
        w.b_1 = vec![0.0; 256];
        w.b_2 = vec![0.0; 64];
        w.gamma = vec![1.0; 64];
        let x = Matrix::from_fn(2, 64, |r, _| 0.3 + r as f64);
        let out = ref_ffn_resblock(&x, &w).unwrap();
        for r in 0..2 {
            for (o, b) in out.row(r).iter().zip(&w.beta) {
                assert!((o - b).abs() <= 1e-9, "{o} vs {b}");
            }
        }
    }

    #[test]
    fn ffn_dead_relu_reduces_to_layernorm_of_input_plus_bias() {
        let (_, mut w, x, _, _) = setup(1, 3, 9);
        w.b_1 = vec![-1e6; 256];
        let mut g = x.clone();
        g.add_row_bias(&w.b_2);
        let expected = ref_layernorm(&g, &w.gamma, &w.beta);
        assert_eq!(ref_ffn_resblock(&x, &w).unwrap(), expected);
    }

    #[test]
    fn layernorm_row_examples() {
        let beta = [0.1, 0.2, 0.3];
        assert_eq!(
            ref_layernorm_row(&[5.0; 3], &[1.0; 3], &beta),
            beta.to_vec()
        );
        let out = ref_layernorm_row(&[1.0, -1.0], &[1.0; 2], &[0.0; 2]);
        let k = (1.0f64 + 1e-8).sqrt().recip();
        assert_eq!(out, vec![k, -k]);
    }

    #[test]
    fn one_pass_variance_matches_two_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..100 {
            let g: Vec<f64> = (0..512).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let mean = g.iter().sum::<f64>() / 512.0;
            let two = g.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 512.0;
            assert!((one_pass_variance(&g) - two).abs() <= 1e-9 * two);
        }
    }

    #[test]
    fn permutation_equivariance() {
        let (_, w, q, k, v) = setup(1, 4, 11);
        let mask = MaskMatrix::new(
            4,
            vec![
                false, true, false, false, false, false, true, false, true, false, false, false,
                false, false, false, true,
            ],
        )
        .unwrap();
        let perm = [2, 0, 3, 1];
        let permute = |m: &Matrix| Matrix::from_fn(4, m.cols(), |r, c| m.get(perm[r], c));
        let out = ref_mha_resblock(&q, &k, &v, &w, &mask).unwrap();
        let out_p = ref_mha_resblock(
            &permute(&q),
            &permute(&k),
            &permute(&v),
            &w,
            &mask.permuted(&perm),
        )
        .unwrap();
        let expected = permute(&out);
        for (a, b) in out_p.as_slice().iter().zip(expected.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-50.0f64..50.0, 25), bits in proptest::collection::vec(any::<bool>(), 25)) {
            let mut bits = bits;
            for r in 0..5 { bits[r * 5 + r] = false; }
            let mask = MaskMatrix::new(5, bits).unwrap();
            let p = ref_masked_softmax(&Matrix::from_vec(5, 5, vals).unwrap(), &mask).unwrap();
            for r in 0..5 {
                let sum: f64 = p.row(r).iter().sum();
                prop_assert!((sum - 1.0).abs() <= 1e-12);
                for c in 0..5 {
                    if mask.is_masked(r, c) { prop_assert_eq!(p.get(r, c), 0.0); }
                }
            }
        }

        #[test]
        fn layernorm_output_is_standardized(g in proptest::collection::vec(-10.0f64..10.0, 64)) {
            let mean = g.iter().sum::<f64>() / 64.0;
            let var = g.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 64.0;
            prop_assume!(var > 1e-3);
            let out = ref_layernorm_row(&g, &[1.0; 64], &[0.0; 64]);
            let m = out.iter().sum::<f64>() / 64.0;
            let v = out.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 64.0;
            prop_assert!(m.abs() <= 1e-9);
            prop_assert!((v - 1.0).abs() <= 1e-6);
        }
    }
}
