//! Dense numerics: matrices, scalar activations, a reverse-mode tape and
//! a central-difference gradient checker.
//!
//! All training math runs in `f64`. The [`Graph`] tape records matrix-level
//! operations during a forward pass and replays them backwards; every
//! operation that can reach the training objective has a hand-derived
//! backward rule, validated against [`finite_difference_gradcheck`].

mod gradcheck;
mod graph;
mod matrix;
mod param;

pub use gradcheck::{
    finite_difference_gradcheck, finite_difference_gradcheck_terms, GradCheckReport, DEFAULT_STEP, REL_ERR_FLOOR,
};
pub(crate) use graph::{diou_from_offsets, focal_term};
pub use graph::{ContrastiveAnchor, Gradients, Graph, Var};
pub use matrix::{gemm, Matrix};
pub use param::{ParamId, ParamSet, Parameter};

use crate::error::{Error, Result};

/// Epsilon added to the variance in layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &Matrix) -> Result<Matrix> {
    if !m.is_finite() {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let mut out = m.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

/// Layer normalization of one vector followed by an elementwise affine map.
pub fn layer_norm(v: &[f64], gain: &[f64], bias: &[f64]) -> Result<Vec<f64>> {
    if v.len() != gain.len() || v.len() != bias.len() {
        return Err(Error::Shape(format!(
            "layer_norm lengths: input {}, gain {}, bias {}",
            v.len(),
            gain.len(),
            bias.len()
        )));
    }
    if v.len() < 2 {
        return Err(Error::InvalidArgument("layer_norm needs at least 2 values".into()));
    }
    let (mean, inv_std) = norm_stats(v);
    Ok(v.iter().zip(gain).zip(bias).map(|((x, g), b)| (x - mean) * inv_std * g + b).collect())
}

/// Mean and `1/sqrt(var + eps)` of a slice (population variance).
pub(crate) fn norm_stats(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        let m = softmax_rows(&Matrix::from_rows(&[[0.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(m.data(), &[0.5, 0.5]);
        let m = softmax_rows(&Matrix::from_rows(&[[1000.0, 1000.0]]).unwrap()).unwrap();
        assert_eq!(m.data(), &[0.5, 0.5]);
        let m = softmax_rows(&Matrix::from_rows(&[[0.0, 3f64.ln()]]).unwrap()).unwrap();
        assert!((m.get(0, 0) - 0.25).abs() < 1e-15);
        assert!((m.get(0, 1) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let m = Matrix::from_vec_unchecked(1, 2, vec![0.0, f64::INFINITY]);
        assert!(softmax_rows(&m).is_err());
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(50.0) - 1.0).abs() < 1e-9);
        assert!((sigmoid(3f64.ln()) - 0.75).abs() < 1e-15);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn layer_norm_examples() {
        let out = layer_norm(&[3.0; 4], &[1.0; 4], &[0.0; 4]).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));

        // variance of [1,-1] is 1, so the output is ±1/sqrt(1 + 1e-5)
        let out = layer_norm(&[1.0, -1.0], &[1.0; 2], &[0.0; 2]).unwrap();
        let expect = 1.0 / (1.0 + 1e-5f64).sqrt();
        assert!((out[0] - expect).abs() < 1e-15 && (out[1] + expect).abs() < 1e-15);

        assert!(layer_norm(&[1.0, 2.0], &[1.0], &[0.0, 0.0]).is_err());
        assert!(layer_norm(&[1.0], &[1.0], &[0.0]).is_err());
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..7, seed in proptest::collection::vec(-60.0f64..60.0, 35)) {
            let m = Matrix::from_fn(rows, cols, |i, j| seed[(i * cols + j) % seed.len()] * (1.0 + i as f64));
            let s = softmax_rows(&m).unwrap();
            for i in 0..rows {
                let sum: f64 = s.row(i).iter().sum();
                prop_assert!((sum - 1.0).abs() <= 1e-12);
                prop_assert!(s.row(i).iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn layer_norm_shift_invariant(v in proptest::collection::vec(-10.0f64..10.0, 2..12), shift in -100.0f64..100.0) {
            let n = v.len();
            let gain = vec![1.0; n];
            let bias = vec![0.0; n];
            let a = layer_norm(&v, &gain, &bias).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
            let b = layer_norm(&shifted, &gain, &bias).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
        }

        #[test]
        fn layer_norm_affine_mean(v in proptest::collection::vec(-10.0f64..10.0, 2..12), g in 0.1f64..3.0, b in proptest::collection::vec(-2.0f64..2.0, 12)) {
            let n = v.len();
            let bias = &b[..n];
            let out = layer_norm(&v, &vec![g; n], bias).unwrap();
            let mean_out = out.iter().sum::<f64>() / n as f64;
            let mean_bias = bias.iter().sum::<f64>() / n as f64;
            prop_assert!((mean_out - mean_bias).abs() <= 1e-9);
        }
    }
}
