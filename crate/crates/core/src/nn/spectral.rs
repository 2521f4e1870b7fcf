//! Spectral normalization by power iteration.

use serde::{Deserialize, Serialize};

use crate::autodiff::{axpy, dot};
use crate::tensor::Tensor;

/// Persistent left singular vector estimate for one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralNormState {
    pub u: Vec<f32>,
    pub n_power_iter: usize,
}

impl SpectralNormState {
    /// Starts from a uniform unit vector.
    pub fn new(rows: usize, n_power_iter: usize) -> Self {
        let v = 1.0 / (rows.max(1) as f32).sqrt();
        Self {
            u: vec![v; rows],
            n_power_iter: n_power_iter.max(1),
        }
    }

    pub fn from_vector(u: Vec<f32>, n_power_iter: usize) -> Self {
        let mut s = Self {
            u,
            n_power_iter: n_power_iter.max(1),
        };
        let uf: Vec<f64> = s.u.iter().map(|&x| x as f64).collect();
        let norm = dot(&uf, &uf).sqrt();
        if norm > 0.0 {
            s.u = uf.iter().map(|&x| (x / norm) as f32).collect();
        }
        s
    }
}

/// A weight viewed as a `rows x cols` matrix in `f64`.
#[derive(Clone, Debug)]
pub struct WeightMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl WeightMatrix {
    /// Conv kernels `[C_out, C_in, kh, kw]` become `C_out x (C_in*kh*kw)`;
    /// linear weights `[D, K]` become their transpose `K x D`, so rows
    /// always index output units.
    pub fn from_weight(weight: &Tensor, transposed: bool) -> Self {
        let s = weight.shape();
        if transposed {
            let (d, k) = (s[0], s[1]);
            let mut data = vec![0.0; d * k];
            for i in 0..d {
                for j in 0..k {
                    data[j * d + i] = weight.data()[i * k + j] as f64;
                }
            }
            Self { rows: k, cols: d, data }
        } else {
            let rows = s[0];
            let cols = weight.numel() / rows.max(1);
            Self {
                rows,
                cols,
                data: weight.data().iter().map(|&v| v as f64).collect(),
            }
        }
    }

    fn mul_t(&self, u: &[f64]) -> Vec<f64> {
        let mut v = vec![0.0; self.cols];
        for (r, &ur) in u.iter().enumerate() {
            if ur != 0.0 {
                axpy(ur, &self.data[r * self.cols..][..self.cols], &mut v);
            }
        }
        v
    }

    fn mul(&self, v: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| dot(&self.data[r * self.cols..][..self.cols], v))
            .collect()
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&x| x == 0.0)
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Runs `iters` steps of `v <- W^T u / |W^T u|`, `u <- W v / |W v|` and
/// returns `sigma = u^T W v`. With `iters == 0` only `v` is refreshed and
/// `u` is left untouched. A zero matrix yields `sigma = 0`.
pub fn power_iteration(w: &WeightMatrix, u: &mut [f64], iters: usize) -> f64 {
    if w.is_zero() {
        return 0.0;
    }
    if dot(u, u) == 0.0 {
        let e = 1.0 / (u.len() as f64).sqrt();
        u.iter_mut().for_each(|x| *x = e);
    }
    let mut v = w.mul_t(u);
    if normalize(&mut v) == 0.0 {
        // u is orthogonal to the row space; restart from a dense vector
        for (i, x) in u.iter_mut().enumerate() {
            *x = 1.0 + (i as f64) * 1e-3;
        }
        normalize(u);
        v = w.mul_t(u);
        normalize(&mut v);
    }
    for _ in 0..iters {
        let mut nu = w.mul(&v);
        if normalize(&mut nu) == 0.0 {
            break;
        }
        u.copy_from_slice(&nu);
        v = w.mul_t(u);
        normalize(&mut v);
    }
    dot(u, &w.mul(&v))
}

/// Divides `weight` by its estimated largest singular value.
///
/// Runs the state's power-iteration count, persisting `u`. The returned
/// sigma is a plain number; gradients through the normalized weight see it
/// as a constant. A zero weight comes back unchanged with sigma 0.
pub fn spectral_normalize(weight: &Tensor, transposed: bool, state: &mut SpectralNormState) -> (Tensor, f64) {
    let sigma = estimate_sigma(weight, transposed, state, true);
    let out = if sigma > 0.0 {
        let data = weight.data().iter().map(|&x| (x as f64 / sigma) as f32).collect();
        Tensor::new(weight.shape().to_vec(), data).expect("same shape")
    } else {
        weight.clone()
    };
    (out, sigma)
}

/// Sigma from the stored `u`, optionally advancing the iteration.
pub(crate) fn estimate_sigma(weight: &Tensor, transposed: bool, state: &mut SpectralNormState, update: bool) -> f64 {
    let m = WeightMatrix::from_weight(weight, transposed);
    let mut u: Vec<f64> = state.u.iter().map(|&x| x as f64).collect();
    if u.len() != m.rows {
        u = vec![1.0 / (m.rows as f64).sqrt(); m.rows];
    }
    let iters = if update { state.n_power_iter } else { 0 };
    let sigma = power_iteration(&m, &mut u, iters);
    if update {
        state.u = u.iter().map(|&x| x as f32).collect();
    }
    sigma
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_weight() {
        let w = Tensor::new(vec![2, 2, 1, 1], vec![3.0, 0.0, 0.0, 1.0]).unwrap();
        let mut st = SpectralNormState::new(2, 50);
        let (n, sigma) = spectral_normalize(&w, false, &mut st);
        assert!((sigma - 3.0).abs() < 1e-9);
        let expected = [1.0, 0.0, 0.0, 1.0 / 3.0];
        for (a, b) in n.data().iter().zip(expected) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
        let norm: f64 = st.u.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rank_one_exact_after_one_iteration() {
        let u0 = [0.6f64, 0.8];
        let v0 = [1.0 / 3.0f64, 2.0 / 3.0, 2.0 / 3.0];
        let mut data = Vec::new();
        for a in u0 {
            for b in v0 {
                data.push((5.0 * a * b) as f32);
            }
        }
        let w = Tensor::new(vec![2, 3], data).unwrap();
        let mut st = SpectralNormState::new(2, 1);
        let (_, sigma) = spectral_normalize(&w, false, &mut st);
        assert!((sigma - 5.0).abs() < 1e-5, "{sigma}");
    }

    #[test]
    fn zero_weight_is_returned_unchanged() {
        let w = Tensor::zeros(vec![3, 2, 3, 3]);
        let mut st = SpectralNormState::new(3, 5);
        let (n, sigma) = spectral_normalize(&w, false, &mut st);
        assert_eq!(sigma, 0.0);
        assert_eq!(n, w);
    }

    #[test]
    fn linear_weights_use_output_rows() {
        // [D=3, K=2]; transpose has the same singular values
        let w = Tensor::new(vec![3, 2], vec![2.0, 0.0, 0.0, 0.5, 0.0, 0.0]).unwrap();
        let mut st = SpectralNormState::new(2, 30);
        let (_, sigma) = spectral_normalize(&w, true, &mut st);
        assert!((sigma - 2.0).abs() < 1e-9);
        assert_eq!(st.u.len(), 2);
    }
}
