//! Elementwise activations, the loss and argmax.

use crate::error::{ensure, ContractViolation};
use crate::tensor::Tensor;

/// Probabilities are clamped to this floor before taking the log.
pub const PROB_FLOOR: f32 = 1e-12;

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Max-shifted softmax over one logit row, in place.
pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = libm::expf(*v - max);
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// [`softmax_in_place`] in double precision, used inside the forward pass.
pub(crate) fn softmax64_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        *v = libm::exp(*v - max);
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Softmax over the last axis; a rank-1 tensor is treated as a single row.
pub fn softmax(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let width = x.dims().last().copied().unwrap_or(0);
    if width > 0 {
        for row in out.data_mut().chunks_mut(width) {
            softmax_in_place(row);
        }
    }
    out
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Sum (not mean) of `-ln(max(p, floor))` at each row's label.
pub(crate) fn cross_entropy_sum(probs: &Tensor, labels: &[u8]) -> Result<f64, ContractViolation> {
    let width = probs.dims().last().copied().unwrap_or(0);
    ensure!(
        probs.dims().len() == 2 && probs.rows() == labels.len(),
        "probabilities {:?} do not match {} labels",
        probs.dims(),
        labels.len()
    );
    let mut total = 0.0f64;
    for (i, &label) in labels.iter().enumerate() {
        ensure!(
            (label as usize) < width,
            "label {} at row {} outside 0..{}",
            label,
            i,
            width
        );
        let p = probs.row(i)[label as usize].max(PROB_FLOOR);
        total -= libm::log(p as f64);
    }
    Ok(total)
}

/// Mean categorical cross-entropy of a batch of probability rows.
pub fn cross_entropy_loss(probs: &Tensor, labels: &[u8]) -> Result<f64, ContractViolation> {
    ensure!(!labels.is_empty(), "cross-entropy of an empty batch");
    Ok(cross_entropy_sum(probs, labels)? / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;

    fn row(values: &[f32]) -> Tensor {
        Tensor::from_vec(values.to_vec())
    }

    #[test]
    fn relu_examples() {
        assert_eq!(relu(&row(&[-1.0, 0.0, 2.5])).data(), &[0.0, 0.0, 2.5]);
        assert_eq!(relu(&Tensor::zeros(&[4])).data(), &[0.0; 4]);
        assert_eq!(relu(&row(&[7.0])).data(), &[7.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let p = softmax(&Tensor::zeros(&[10]));
        for &v in p.data() {
            assert!((v - 0.1).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let x = row(&[0.3, -1.2, 4.0, 0.0, 2.2, -0.7, 1.1, 0.5, -3.0, 0.9]);
        let a = softmax(&x);
        let b = softmax(&x.map(|v| v + 17.5));
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_matches_double_precision_reference() {
        let x = [1.0f64, 2.0, 3.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        // Reference evaluated directly in f64.
        let denom: f64 = x.iter().map(|v| v.exp()).sum();
        let expected: Vec<f64> = x.iter().map(|v| v.exp() / denom).collect();
        let got = softmax(&row(&x.map(|v| v as f32)));
        for (g, e) in got.data().iter().zip(&expected) {
            assert!((*g as f64 - e).abs() < 1e-6, "{g} vs {e}");
        }
        // Frozen from the reference above: e^3 / (e + e^2 + e^3 + 7).
        assert!((got.data()[2] as f64 - 0.540_037_225_0).abs() < 1e-6);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.1; 10]), 0);
        assert_eq!(argmax(&[0.0, 0.5, 0.5, 0.2]), 1);
        assert_eq!(argmax(&[0.0, 0.1, 0.9]), 2);
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = Tensor::new(vec![3, 10], vec![0.1; 30]).unwrap();
        let loss = cross_entropy_loss(&uniform, &[0, 4, 9]).unwrap();
        assert!((loss - core::f64::consts::LN_10).abs() < 1e-5);

        let mut one_hot = vec![0.0; 10];
        one_hot[3] = 1.0;
        let sure = Tensor::new(vec![1, 10], one_hot).unwrap();
        assert!(cross_entropy_loss(&sure, &[3]).unwrap().abs() < 1e-6);
        // A zero probability on the label is clamped rather than infinite.
        let clamped = cross_entropy_loss(&sure, &[2]).unwrap();
        assert!((clamped + f64::from(1e-12f32.ln())).abs() < 1e-3);
    }

    #[test]
    fn cross_entropy_three_sample_reference() {
        let rows: [[f64; 10]; 3] = [
            [0.05, 0.05, 0.6, 0.05, 0.05, 0.05, 0.05, 0.04, 0.03, 0.03],
            [0.3, 0.1, 0.1, 0.1, 0.1, 0.1, 0.05, 0.05, 0.05, 0.05],
            [0.01, 0.01, 0.01, 0.01, 0.01, 0.01, 0.01, 0.01, 0.02, 0.9],
        ];
        let labels = [2u8, 1, 8];
        let expected = -(rows[0][2].ln() + rows[1][1].ln() + rows[2][8].ln()) / 3.0;
        // (0.5108256 + 2.3025851 + 3.9120230) / 3
        assert!((expected - 2.241_811_2).abs() < 1e-6);
        let data: Vec<f32> = rows.iter().flatten().map(|&v| v as f32).collect();
        let probs = Tensor::new(vec![3, 10], data).unwrap();
        let got = cross_entropy_loss(&probs, &labels).unwrap();
        assert!((got - expected).abs() < 1e-6, "{got} vs {expected}");
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let uniform = Tensor::new(vec![1, 10], vec![0.1; 10]).unwrap();
        assert!(cross_entropy_loss(&uniform, &[10]).is_err());
        assert!(cross_entropy_loss(&uniform, &[1, 2]).is_err());
    }
}
