//! Adam and global-norm gradient clipping over parameter tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Hyperparameters plus per-parameter moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

/// Serializable scalar part of an [`Adam`] state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamMeta {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
}

impl Adam {
    pub fn new(lr: f64, betas: (f64, f64)) -> Self {
        Self {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn meta(&self) -> AdamMeta {
        AdamMeta {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            t: self.t,
        }
    }

    pub fn moments(&self) -> (&[Vec<f32>], &[Vec<f32>]) {
        (&self.m, &self.v)
    }

    pub fn from_parts(meta: AdamMeta, m: Vec<Vec<f32>>, v: Vec<Vec<f32>>) -> Result<Self> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::Format("adam moment arrays disagree in shape".into()));
        }
        Ok(Self {
            lr: meta.lr,
            beta1: meta.beta1,
            beta2: meta.beta2,
            eps: meta.eps,
            t: meta.t,
            m,
            v,
        })
    }

    /// One bias-corrected descent step on every parameter that carries a
    /// gradient. Parameters without `requires_grad` are skipped but keep
    /// their slot in the moment arrays.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::shape(
                "adam_step",
                format!("optimizer tracks {} parameters, got {}", self.m.len(), params.len()),
            ));
        }
        for (i, p) in params.iter().enumerate() {
            if self.m[i].len() != p.numel() {
                return Err(Error::shape(
                    "adam_step",
                    format!("parameter {i} has {} values, moments {}", p.numel(), self.m[i].len()),
                ));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            if !p.requires_grad() {
                continue;
            }
            let Some(grad) = p.grad().map(|g| g.to_vec()) else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let g = grad[j] as f64;
                let mj = self.beta1 * m[j] as f64 + (1.0 - self.beta1) * g;
                let vj = self.beta2 * v[j] as f64 + (1.0 - self.beta2) * g * g;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let update = self.lr * (mj / c1) / ((vj / c2).sqrt() + self.eps);
                *w = (*w as f64 - update) as f32;
            }
        }
        Ok(())
    }
}

/// Rescales all gradients by `max_norm / norm` when their global L2 norm
/// exceeds `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut [&mut Tensor], max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::InvalidArgument(format!("clip norm {max_norm} must be positive")));
    }
    let total: f64 = params
        .iter()
        .filter_map(|p| p.grad())
        .flat_map(|g| g.iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    if total > max_norm {
        let s = max_norm / total;
        for p in params.iter_mut() {
            if let Some(g) = p.grad_mut() {
                g.iter_mut().for_each(|x| *x = (*x as f64 * s) as f32);
            }
        }
    }
    Ok(total)
}
