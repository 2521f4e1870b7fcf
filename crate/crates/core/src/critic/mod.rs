//! Wasserstein critics, their losses, the CE domain-classifier baseline and
//! an exact one-dimensional W1 oracle.

pub mod bench;

pub use bench::{
    gather_rows, gradient_contrast, train_ce_classifier, train_wasserstein_critic, ContrastReport, CriticTrace,
    TrainCriticConfig,
};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{build_network, Bound, LayerSpec, Network, DEFAULT_SLOPE};
use crate::tensor::Real;

/// Channel widths of a critic: full width or the scaled-down desk
/// version used for CPU training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticVariant {
    Full,
    Desk,
}

impl std::str::FromStr for CriticVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "desk" => Ok(Self::Desk),
            other => Err(Error::InvalidArgument(format!("unknown critic variant {other:?}"))),
        }
    }
}

/// A W estimate logged at one optimization step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WEstimate {
    pub value: f64,
    pub step: usize,
}

/// Max-pool followed by four spectrally normalized 3x3 convs. The last conv
/// has no bias and produces one score per patch.
///
/// The desk variant runs its first conv at stride 1: on the 8x8 feature
/// maps of the desk backbone the published strides would leave a single
/// patch.
pub fn global_critic_specs(variant: CriticVariant, in_channels: usize) -> Vec<LayerSpec> {
    let (c1, c2, s1) = match variant {
        CriticVariant::Full => (512, 128, 2),
        CriticVariant::Desk => (64, 32, 1),
    };
    vec![
        LayerSpec::max_pool(2, 2, 0),
        LayerSpec::conv(in_channels, c1, 3, s1, 1).spectral(),
        LayerSpec::leaky_relu(DEFAULT_SLOPE),
        LayerSpec::conv(c1, c2, 3, 2, 1).spectral(),
        LayerSpec::leaky_relu(DEFAULT_SLOPE),
        LayerSpec::conv(c2, c2, 3, 1, 1).spectral(),
        LayerSpec::leaky_relu(DEFAULT_SLOPE),
        LayerSpec::conv(c2, 1, 3, 1, 1).spectral().without_bias(),
    ]
}

/// Three spectrally normalized convs (3x3, 2x2, 2x2, all pad 1) over ROI
/// features, optionally preceded by a gradient-reversal layer. The final
/// conv projects to a single score channel.
pub fn local_critic_specs(variant: CriticVariant, in_channels: usize, grl: bool) -> Vec<LayerSpec> {
    let (c1, c2) = match variant {
        CriticVariant::Full => (512, 128),
        CriticVariant::Desk => (64, 32),
    };
    let mut specs = Vec::with_capacity(6);
    if grl {
        specs.push(LayerSpec::grl());
    }
    specs.extend([
        LayerSpec::conv(in_channels, c1, 3, 1, 1).spectral(),
        LayerSpec::leaky_relu(DEFAULT_SLOPE),
        LayerSpec::conv(c1, c2, 2, 1, 1).spectral(),
        LayerSpec::leaky_relu(DEFAULT_SLOPE),
        LayerSpec::conv(c2, 1, 2, 1, 1).spectral().without_bias(),
    ]);
    specs
}

/// Global-level CE domain classifier: the desk global critic layout without
/// spectral norm and with a biased output logit.
pub fn ce_patch_classifier_specs(in_channels: usize) -> Vec<LayerSpec> {
    global_critic_specs(CriticVariant::Desk, in_channels)
        .into_iter()
        .map(|mut s| {
            s.spectral_norm = false;
            if let crate::nn::LayerKind::Conv { bias, .. } = &mut s.kind {
                *bias = true;
            }
            s
        })
        .collect()
}

/// Spectrally normalized MLP critic on `dim`-dimensional points.
pub fn mlp_critic_specs(dim: usize, hidden: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::linear(dim, hidden).spectral(),
        LayerSpec::leaky_relu(DEFAULT_SLOPE),
        LayerSpec::linear(hidden, hidden).spectral(),
        LayerSpec::leaky_relu(DEFAULT_SLOPE),
        LayerSpec::linear(hidden, 1).spectral().without_bias(),
    ]
}

/// The same MLP without spectral norm and with a biased logit, for the CE
/// baseline.
pub fn mlp_classifier_specs(dim: usize, hidden: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::linear(dim, hidden),
        LayerSpec::leaky_relu(DEFAULT_SLOPE),
        LayerSpec::linear(hidden, hidden),
        LayerSpec::leaky_relu(DEFAULT_SLOPE),
        LayerSpec::linear(hidden, 1),
    ]
}

pub fn build_global_critic(variant: CriticVariant, in_channels: usize, seed: u64) -> Result<Network> {
    build_network("global_critic", &global_critic_specs(variant, in_channels), seed)
}

pub fn build_local_critic(variant: CriticVariant, in_channels: usize, grl: bool, seed: u64) -> Result<Network> {
    build_network("local_critic", &local_critic_specs(variant, in_channels, grl), seed)
}

fn check_features<T: Real>(op: &'static str, critic: &Network, tape: &Tape<T>, x: Var) -> Result<()> {
    let s = tape.shape(x);
    if s.len() != 4 {
        return Err(Error::shape(op, format!("expected [N,C,H,W] features, got {s:?}")));
    }
    match critic.input_channels() {
        Some(c) if c != s[1] => Err(Error::shape(
            op,
            format!("critic expects {c} channels, features have {}", s[1]),
        )),
        _ => Ok(()),
    }
}

/// Patch score map `[N,1,H',W']` of the global critic. The binding carries
/// the spectrally normalized weights.
pub fn global_critic_forward<T: Real>(tape: &mut Tape<T>, critic: &Network, bound: &Bound, features: Var) -> Result<Var> {
    check_features("global_critic_forward", critic, tape, features)?;
    critic.forward(tape, bound, features)
}

/// Patch score map `[P,1,h,w]` of the local critic over pooled ROI features.
pub fn local_critic_forward<T: Real>(tape: &mut Tape<T>, critic: &Network, bound: &Bound, rois: Var) -> Result<Var> {
    check_features("local_critic_forward", critic, tape, rois)?;
    critic.forward(tape, bound, rois)
}

/// `mean(scores_t) - mean(scores_s)`, each mean taken jointly over batch
/// and patch positions. Minimizing it maximizes the dual W estimate, which
/// is the negation of this value.
pub fn critic_loss<T: Real>(tape: &mut Tape<T>, scores_s: Var, scores_t: Var) -> Result<Var> {
    let ms = tape.mean_all(scores_s)?;
    let mt = tape.mean_all(scores_t)?;
    tape.sub(mt, ms)
}

/// `-mean(scores_t)`: the target generator's objective.
pub fn generator_loss<T: Real>(tape: &mut Tape<T>, scores_t: Var) -> Result<Var> {
    let mt = tape.mean_all(scores_t)?;
    tape.neg(mt)
}

/// Local alignment shares one loss between critic and RPN; the critic's
/// leading gradient-reversal layer turns it into ascent for the RPN.
pub fn local_alignment_loss<T: Real>(tape: &mut Tape<T>, scores_s: Var, scores_t: Var) -> Result<Var> {
    critic_loss(tape, scores_s, scores_t)
}

fn half_bce_pair<T: Real>(tape: &mut Tape<T>, logits_s: Var, target_s: f64, logits_t: Var, target_t: f64) -> Result<Var> {
    let ns = tape.value(logits_s).numel();
    let nt = tape.value(logits_t).numel();
    let ls = tape.sigmoid_bce(logits_s, &vec![target_s; ns])?;
    let lt = tape.sigmoid_bce(logits_t, &vec![target_t; nt])?;
    let sum = tape.add(ls, lt)?;
    tape.scale(sum, 0.5)
}

/// Domain-classifier BCE with label 1 for source and 0 for target patches.
pub fn ce_domain_classifier_loss<T: Real>(tape: &mut Tape<T>, logits_s: Var, logits_t: Var) -> Result<Var> {
    half_bce_pair(tape, logits_s, 1.0, logits_t, 0.0)
}

/// The generator step of the CE baseline: the same BCE with labels swapped.
pub fn ce_generator_loss<T: Real>(tape: &mut Tape<T>, logits_s: Var, logits_t: Var) -> Result<Var> {
    half_bce_pair(tape, logits_s, 0.0, logits_t, 1.0)
}

/// Exact W1 between two equal-size empirical measures on the line: the
/// mean absolute gap between order statistics.
pub fn exact_w1_sorted(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::InvalidArgument(format!(
            "exact_w1_sorted needs equal non-empty samples, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "exact_w1_sorted" });
    }
    let mut a = x.to_vec();
    let mut b = y.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    Ok(a.iter().zip(&b).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.len() as f64)
}
