//! Row-major f64 tensor storage with an optional gradient buffer.
//!
//! This is parameter storage plus a handful of dense kernels; the model
//! code does its own backward passes, so there is no autograd tape here.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    #[serde(skip)]
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n], grad: None }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data, grad: None })
    }

    /// Gaussian init, the GPT-2 convention of N(0, std).
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| gaussian(rng) * std).collect();
        Tensor { shape: shape.to_vec(), data, grad: None }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn scale(&mut self, beta: f64) {
        if beta == 1.0 {
            return; // bit-exact no-op
        }
        for v in &mut self.data {
            *v *= beta;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Accumulating gradient buffer, allocated on first touch.
    pub fn grad_mut(&mut self) -> &mut [f64] {
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
        self.grad.as_mut().unwrap()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Box-Muller, two uniform draws per sample.
pub fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// out[m x p] = a[m x n] @ b[n x p]
pub fn matmul(a: &[f64], b: &[f64], m: usize, n: usize, p: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), n * p);
    debug_assert_eq!(out.len(), m * p);
    out.fill(0.0);
    for i in 0..m {
        for k in 0..n {
            let av = a[i * n + k];
            if av == 0.0 {
                continue;
            }
            let brow = &b[k * p..(k + 1) * p];
            let orow = &mut out[i * p..(i + 1) * p];
            for j in 0..p {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// out[m x p] += a[m x n] @ b[n x p]
pub fn matmul_acc(a: &[f64], b: &[f64], m: usize, n: usize, p: usize, out: &mut [f64]) {
    for i in 0..m {
        for k in 0..n {
            let av = a[i * n + k];
            if av == 0.0 {
                continue;
            }
            let brow = &b[k * p..(k + 1) * p];
            let orow = &mut out[i * p..(i + 1) * p];
            for j in 0..p {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// out[m x p] += a[n x m]^T @ b[n x p]  (a transposed on the fly)
pub fn matmul_at_acc(a: &[f64], b: &[f64], n: usize, m: usize, p: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), n * m);
    debug_assert_eq!(b.len(), n * p);
    debug_assert_eq!(out.len(), m * p);
    for k in 0..n {
        let arow = &a[k * m..(k + 1) * m];
        let brow = &b[k * p..(k + 1) * p];
        for i in 0..m {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * p..(i + 1) * p];
            for j in 0..p {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// out[m x n] += a[m x p] @ b[n x p]^T  (b transposed on the fly)
pub fn matmul_bt_acc(a: &[f64], b: &[f64], m: usize, p: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * p);
    debug_assert_eq!(b.len(), n * p);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * p..(i + 1) * p];
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * p..(j + 1) * p];
            let mut acc = 0.0;
            for k in 0..p {
                acc += arow[k] * brow[k];
            }
            orow[j] += acc;
        }
    }
}

/// In-place softmax of a single row; returns nothing, row sums to 1.
pub fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn matmul_small() {
        // [1 2; 3 4] @ [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut out = [0.0; 4];
        matmul(&a, &b, 2, 2, 2, &mut out);
        assert_eq!(out, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transposed_matmuls_agree_with_plain() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[3, 5], 1.0, &mut rng);
        // a^T @ b via matmul_at_acc vs explicit transpose
        let mut at = vec![0.0; 12];
        for i in 0..3 {
            for j in 0..4 {
                at[j * 3 + i] = a.data[i * 4 + j];
            }
        }
        let mut want = vec![0.0; 20];
        matmul(&at, &b.data, 4, 3, 5, &mut want);
        let mut got = vec![0.0; 20];
        matmul_at_acc(&a.data, &b.data, 3, 4, 5, &mut got);
        for (w, g) in want.iter().zip(&got) {
            assert!((w - g).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_is_simplex() {
        let mut row = vec![1.0, -2.0, 0.5, 3.0];
        softmax_row(&mut row);
        let sum: f64 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn scale_by_one_is_bit_exact() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut t = Tensor::randn(&[4, 4], 0.02, &mut rng);
        let before = t.data.clone();
        t.scale(1.0);
        assert_eq!(t.data, before);
    }
}
