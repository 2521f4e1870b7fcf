//! Critic training on point clouds, and the CE-versus-Wasserstein gradient
//! comparison.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ce_domain_classifier_loss, critic_loss, generator_loss, mlp_classifier_specs, mlp_critic_specs, WEstimate};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::nn::{build_network, Adam, Network};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainCriticConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    pub hidden: usize,
    pub seed: u64,
}

impl Default for TrainCriticConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 64,
            lr: 1e-3,
            betas: (0.0, 0.99),
            hidden: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CriticTrace {
    /// Batch estimates, one per critic step.
    pub estimates: Vec<WEstimate>,
    /// Dual estimate over the full sample sets after training.
    pub final_estimate: f64,
}

/// Rows `idx` of a `[N, D]` tensor.
pub fn gather_rows(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    if t.rank() != 2 {
        return Err(Error::shape("gather_rows", format!("expected [N,D], got {:?}", t.shape())));
    }
    let d = t.shape()[1];
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        if i >= t.shape()[0] {
            return Err(Error::InvalidArgument(format!("row {i} out of range")));
        }
        data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
    }
    Tensor::new(vec![idx.len(), d], data)
}

fn batch_indices(rng: &mut ChaCha8Rng, n: usize, batch: usize) -> Vec<usize> {
    if batch >= n {
        (0..n).collect()
    } else {
        sample(rng, n, batch).into_vec()
    }
}

fn dual_estimate(critic: &Network, xs: &Tensor, xt: &Tensor) -> Result<f64> {
    let mut tape = Tape::<f32>::new();
    let b = critic.bind(&mut tape, false)?;
    let s = tape.constant(xs.clone())?;
    let t = tape.constant(xt.clone())?;
    let ds = critic.forward(&mut tape, &b, s)?;
    let dt = critic.forward(&mut tape, &b, t)?;
    let loss = critic_loss(&mut tape, ds, dt)?;
    Ok(-(tape.value(loss).item()? as f64))
}

/// Trains `critic` to maximize `mean D(xs) - mean D(xt)` with Adam on
/// random mini-batches, refreshing spectral norms before every step.
pub fn train_wasserstein_critic(critic: &mut Network, xs: &Tensor, xt: &Tensor, cfg: &TrainCriticConfig) -> Result<CriticTrace> {
    if xs.shape().first() == Some(&0) || xt.shape().first() == Some(&0) {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.lr, cfg.betas);
    let mut estimates = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let bs = gather_rows(xs, &batch_indices(&mut rng, xs.shape()[0], cfg.batch))?;
        let bt = gather_rows(xt, &batch_indices(&mut rng, xt.shape()[0], cfg.batch))?;
        critic.refresh_spectral_norm();
        let mut tape = Tape::<f32>::new();
        let b = critic.bind(&mut tape, true)?;
        let s = tape.constant(bs)?;
        let t = tape.constant(bt)?;
        let ds = critic.forward(&mut tape, &b, s)?;
        let dt = critic.forward(&mut tape, &b, t)?;
        let loss = critic_loss(&mut tape, ds, dt)?;
        tape.backward(loss)?;
        estimates.push(WEstimate {
            value: -(tape.value(loss).item()? as f64),
            step,
        });
        critic.accumulate_grads(&tape, &b)?;
        adam.step(&mut critic.params_mut())?;
        critic.zero_grads();
    }
    critic.refresh_spectral_norm();
    let final_estimate = dual_estimate(critic, xs, xt)?;
    Ok(CriticTrace {
        estimates,
        final_estimate,
    })
}

/// Trains a CE domain classifier (source label 1, target 0) until its loss
/// on the full sets falls below `target_loss` or `cfg.steps` run out.
/// Returns the final full-set loss.
pub fn train_ce_classifier(
    classifier: &mut Network,
    xs: &Tensor,
    xt: &Tensor,
    cfg: &TrainCriticConfig,
    target_loss: f64,
) -> Result<f64> {
    let full_loss = |net: &Network| -> Result<f64> {
        let mut tape = Tape::<f64>::new();
        let b = net.bind(&mut tape, false)?;
        let s = tape.constant(xs.cast())?;
        let t = tape.constant(xt.cast())?;
        let ls = net.forward(&mut tape, &b, s)?;
        let lt = net.forward(&mut tape, &b, t)?;
        let loss = ce_domain_classifier_loss(&mut tape, ls, lt)?;
        tape.value(loss).item()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.lr, cfg.betas);
    let mut loss = full_loss(classifier)?;
    for step in 0..cfg.steps {
        if loss < target_loss {
            break;
        }
        let bs = gather_rows(xs, &batch_indices(&mut rng, xs.shape()[0], cfg.batch))?;
        let bt = gather_rows(xt, &batch_indices(&mut rng, xt.shape()[0], cfg.batch))?;
        let mut tape = Tape::<f32>::new();
        let b = classifier.bind(&mut tape, true)?;
        let s = tape.constant(bs)?;
        let t = tape.constant(bt)?;
        let ls = classifier.forward(&mut tape, &b, s)?;
        let lt = classifier.forward(&mut tape, &b, t)?;
        let l = ce_domain_classifier_loss(&mut tape, ls, lt)?;
        tape.backward(l)?;
        classifier.accumulate_grads(&tape, &b)?;
        adam.step(&mut classifier.params_mut())?;
        classifier.zero_grads();
        if step % 10 == 9 {
            loss = full_loss(classifier)?;
        }
    }
    full_loss(classifier)
}

/// Mean over samples of the per-sample input-gradient norm of `objective`.
fn mean_input_grad_norm(
    net: &Network,
    xt: &Tensor,
    objective: impl Fn(&mut Tape<f64>, crate::autodiff::Var) -> Result<crate::autodiff::Var>,
) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let b = net.bind(&mut tape, false)?;
    let x = tape.param(xt.cast())?;
    let out = net.forward(&mut tape, &b, x)?;
    let loss = objective(&mut tape, out)?;
    tape.backward(loss)?;
    let g = tape.grad(x).ok_or(Error::InvalidArgument("no gradient reached the input".into()))?;
    let (n, d) = (xt.shape()[0], xt.shape()[1]);
    // the objectives are means over n samples; undo the 1/n per row
    let total: f64 = (0..n)
        .map(|i| g[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt() * n as f64)
        .sum();
    Ok(total / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastReport {
    /// Full-set BCE of the trained domain classifier.
    pub ce_loss: f64,
    /// Per-sample gradient norm of the minimax CE generator objective
    /// `-BCE(D(x_t), 0)` with respect to the target features.
    pub ce_minimax_norm: f64,
    /// Same for the reversed-label objective `BCE(D(x_t), 1)`.
    pub ce_reversed_norm: f64,
    /// Per-sample gradient norm of `-D(x_t)` under the trained critic.
    pub wasserstein_norm: f64,
    /// Dual W estimate of the trained critic.
    pub w_estimate: f64,
}

/// Trains a CE classifier and a Wasserstein critic on the same two clouds
/// and compares the gradients each hands to a target feature generator.
pub fn gradient_contrast(xs: &Tensor, xt: &Tensor, cfg: &TrainCriticConfig, ce_target: f64) -> Result<ContrastReport> {
    let dim = xs.shape()[1];
    let mut classifier = build_network("ce_classifier", &mlp_classifier_specs(dim, cfg.hidden), cfg.seed)?;
    let ce_cfg = TrainCriticConfig {
        lr: cfg.lr.max(1e-3),
        betas: (0.5, 0.99),
        ..cfg.clone()
    };
    let ce_loss = train_ce_classifier(&mut classifier, xs, xt, &ce_cfg, ce_target)?;
    let mut critic = build_network("critic", &mlp_critic_specs(dim, cfg.hidden), cfg.seed)?;
    let trace = train_wasserstein_critic(&mut critic, xs, xt, cfg)?;

    let n = xt.shape()[0];
    let ce_minimax_norm = mean_input_grad_norm(&classifier, xt, |tape, out| {
        let l = tape.sigmoid_bce(out, &vec![0.0; n])?;
        tape.neg(l)
    })?;
    let ce_reversed_norm = mean_input_grad_norm(&classifier, xt, |tape, out| tape.sigmoid_bce(out, &vec![1.0; n]))?;
    let wasserstein_norm = mean_input_grad_norm(&critic, xt, |tape, out| generator_loss(tape, out))?;
    Ok(ContrastReport {
        ce_loss,
        ce_minimax_norm,
        ce_reversed_norm,
        wasserstein_norm,
        w_estimate: trace.final_estimate,
    })
}
