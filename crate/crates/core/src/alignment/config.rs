//! Hyperparameters of the three training stages.

use serde::{Deserialize, Serialize};

use crate::critic::CriticVariant;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentConfig {
    /// Learning rate of the adversarial updates.
    pub alpha: f64,
    /// Scale of the detection-loss learning rate relative to `alpha`.
    pub gamma: f64,
    /// Clip norm of the detection-loss gradient in local alignment.
    pub clip: f64,
    /// Images per domain per mini-batch (n).
    pub batch_size: usize,
    /// Proposals per image (m).
    pub proposals: usize,
    /// Critic updates per generator update (s_d).
    pub critic_steps: usize,
    pub betas_align: (f64, f64),
    pub betas_det: (f64, f64),
    /// Learning rate of source pretraining.
    pub source_lr: f64,
    pub source_steps: usize,
    pub phase1_steps: usize,
    pub phase2_steps: usize,
    pub critic_variant: CriticVariant,
    pub seed: u64,
    /// Record elapsed seconds in the metrics; off keeps metrics byte-stable.
    pub wall_clock: bool,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            alpha: 2e-4,
            gamma: 1.0,
            clip: 1.0,
            batch_size: 4,
            proposals: 16,
            critic_steps: 5,
            betas_align: (0.0, 0.99),
            betas_det: (0.5, 0.99),
            source_lr: 1e-3,
            source_steps: 2000,
            phase1_steps: 500,
            phase2_steps: 200,
            critic_variant: CriticVariant::Desk,
            seed: 0,
            wall_clock: false,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        let betas_ok = |b: (f64, f64)| (0.0..1.0).contains(&b.0) && (0.0..1.0).contains(&b.1);
        if !(self.alpha > 0.0 && self.source_lr > 0.0 && self.clip > 0.0) {
            return Err(Error::Config("alpha, source_lr and clip must be positive".into()));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Config("gamma must be non-negative".into()));
        }
        if self.batch_size == 0 || self.proposals == 0 || self.critic_steps == 0 {
            return Err(Error::Config("batch_size, proposals and critic_steps must be at least 1".into()));
        }
        if !betas_ok(self.betas_align) || !betas_ok(self.betas_det) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}
