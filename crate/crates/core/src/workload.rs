//! Seeded random workloads: weights with unit-scale activations, inputs and
//! masks.

use rand::distributions::{Distribution, Uniform};
use rand::Rng;

use crate::matrix::Matrix;
use crate::plan::{ModelConfig, HEAD_DIM};
use crate::reference::{HeadWeights, ResBlockWeights};
use crate::softmax::MaskMatrix;

fn uniform_matrix(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Matrix {
    let dist = Uniform::new_inclusive(-bound, bound);
    Matrix::from_fn(rows, cols, |_, _| dist.sample(rng))
}

fn uniform_vec(len: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> Vec<f64> {
    let dist = Uniform::new_inclusive(lo, hi);
    (0..len).map(|_| dist.sample(rng)).collect()
}

/// Glorot-uniform weights, small biases, `gamma` near 1 and `beta` near 0.
pub fn random_weights(cfg: &ModelConfig, rng: &mut impl Rng) -> ResBlockWeights {
    let (d, f) = (cfg.d_model(), cfg.d_ff());
    let glorot = |fan_in: usize, fan_out: usize| (6.0 / (fan_in + fan_out) as f64).sqrt();
    let heads = (0..cfg.heads())
        .map(|_| HeadWeights {
            w_q: uniform_matrix(d, HEAD_DIM, glorot(d, HEAD_DIM), rng),
            w_k: uniform_matrix(d, HEAD_DIM, glorot(d, HEAD_DIM), rng),
            w_v: uniform_matrix(d, HEAD_DIM, glorot(d, HEAD_DIM), rng),
            b_q: uniform_vec(HEAD_DIM, -0.1, 0.1, rng),
            b_k: uniform_vec(HEAD_DIM, -0.1, 0.1, rng),
            b_v: uniform_vec(HEAD_DIM, -0.1, 0.1, rng),
        })
        .collect();
    ResBlockWeights {
        heads,
        w_g: uniform_matrix(d, d, glorot(d, d), rng),
        b_g: uniform_vec(d, -0.1, 0.1, rng),
        w_1: uniform_matrix(d, f, glorot(d, f), rng),
        b_1: uniform_vec(f, -0.1, 0.1, rng),
        w_2: uniform_matrix(f, d, glorot(f, d), rng),
        b_2: uniform_vec(d, -0.1, 0.1, rng),
        gamma: uniform_vec(d, 0.75, 1.25, rng),
        beta: uniform_vec(d, -0.25, 0.25, rng),
    }
}

/// Activations uniform in `[-1, 1]`.
pub fn random_activations(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    uniform_matrix(rows, cols, 1.0, rng)
}

/// Each position masked with probability `p`; the diagonal is always legal
/// so no row is fully masked.
pub fn random_mask(size: usize, p: f64, rng: &mut impl Rng) -> MaskMatrix {
    let masked = (0..size * size)
        .map(|i| i / size != i % size && rng.gen_bool(p))
        .collect();
    MaskMatrix::new(size, masked).expect("diagonal keeps every row legal")
}
