//! Small numeric helpers shared by the model and training code.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

pub type Matrix = Array2<f64>;
pub type Vector = Array1<f64>;

pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Matrix {
    let normal = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_fn((rows, cols), |_| normal.sample(rng))
}

/// Numerically stable softmax.
pub fn softmax(logits: ArrayView1<f64>) -> Vector {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = logits.mapv(|v| (v - max).exp());
    let sum = out.sum();
    out /= sum;
    out
}

/// Cross-entropy of `softmax(logits)` against `target`, with the gradient
/// w.r.t. the logits.
pub fn softmax_cross_entropy(logits: ArrayView1<f64>, target: usize) -> (f64, Vector) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let mut grad = logits.mapv(|v| (v - lse).exp());
    grad[target] -= 1.0;
    (lse - logits[target], grad)
}

pub fn mean_rows(m: &Matrix) -> Vector {
    m.mean_axis(Axis(0)).expect("non-empty matrix")
}

/// Rounds every entry to the nearest `f32`, matching what a float32 checkpoint stores.
pub fn round_to_f32(m: &mut Matrix) {
    m.mapv_inplace(|v| v as f32 as f64);
}

pub fn round_vec_to_f32(v: &mut Vector) {
    v.mapv_inplace(|x| x as f32 as f64);
}

pub fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Incremental SHA-256 over tensor contents.
#[derive(Default)]
pub struct Checksum(Sha256);

impl Checksum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update_f64s<'a>(&mut self, values: impl IntoIterator<Item = &'a f64>) {
        for v in values {
            self.0.update(v.to_le_bytes());
        }
    }

    pub fn update_bytes(&mut self, bytes: &[u8]) {
        self.0.update(bytes);
    }

    pub fn finish(self) -> String {
        hex::encode(self.0.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_of_one_zero() {
        let p = softmax(array![1.0, 0.0].view());
        assert!((p[0] - 0.731_058_578_6).abs() < 1e-9);
        assert!((p.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_is_log_n() {
        let (loss, grad) = softmax_cross_entropy(Array1::zeros(7).view(), 3);
        assert!((loss - 7f64.ln()).abs() < 1e-12);
        assert!((grad.sum()).abs() < 1e-12);
    }
}
