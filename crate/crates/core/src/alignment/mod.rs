//! Source pretraining, global (Phase 1) and local (Phase 2) alignment.

mod checkpoint;
mod config;
mod metrics;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Phase, MAGIC, VERSION};
pub use config::AlignmentConfig;
pub use metrics::{append_csv, to_csv, MetricsRecord, METRICS_HEADER};

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::critic::{
    build_global_critic, build_local_critic, critic_loss, generator_loss, global_critic_forward, local_alignment_loss,
    local_critic_forward,
};
use crate::data::Dataset;
use crate::detector::{
    backbone_forward, build_backbone, detection_loss, extract_features, roi_pool, rpn_forward, select_proposals, BBox,
    DetectorConfig, DetectorHead,
};
use crate::error::{Error, Result};
use crate::nn::{clip_grad_norm, clone_network_as, Adam};
use crate::tensor::Tensor;

/// Images per forward pass when caching features.
const FEATURE_CHUNK: usize = 32;

/// Result of one training stage.
#[derive(Clone, Debug)]
pub struct StageOutput {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRecord>,
    pub stats: StageStats,
    pub warnings: Vec<String>,
}

/// Update counters, for checking the alternation schedule.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageStats {
    pub critic_updates: usize,
    pub generator_updates: usize,
    /// Critic updates performed since the previous generator update, one
    /// entry per generator update.
    pub critic_updates_between: Vec<usize>,
    /// False if a critic parameter ever held a gradient after a generator
    /// step.
    pub critic_detached: bool,
}

fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.gen()
}

/// Draws mini-batches: without replacement when the dataset is large
/// enough, otherwise with replacement (and a warning).
struct Sampler {
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn batch(&mut self, total: usize, n: usize) -> Vec<usize> {
        if n <= total {
            sample(&mut self.rng, total, n).into_vec()
        } else {
            (0..n).map(|_| self.rng.gen_range(0..total)).collect()
        }
    }
}

fn check_batch(data: &Dataset, n: usize, what: &str, warnings: &mut Vec<String>) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if n > data.len() {
        warnings.push(format!(
            "batch size {n} exceeds the {} {what} images; sampling with replacement",
            data.len()
        ));
    }
    Ok(())
}

fn detector_config(data: &Dataset, cfg: &AlignmentConfig) -> Result<DetectorConfig> {
    let [c, h, w] = data.image_shape()?;
    if h != w {
        return Err(Error::InvalidArgument(format!("images must be square, got {h}x{w}")));
    }
    let det = DetectorConfig {
        in_channels: c,
        image_size: h,
        proposals: cfg.proposals,
        ..DetectorConfig::default()
    };
    det.validate()?;
    Ok(det)
}

struct Clock {
    start: Instant,
    enabled: bool,
}

impl Clock {
    fn new(enabled: bool) -> Self {
        Self {
            start: Instant::now(),
            enabled,
        }
    }

    fn stamp(&self) -> f64 {
        if self.enabled {
            self.start.elapsed().as_secs_f64()
        } else {
            0.0
        }
    }
}

/// Backbone features of every image, `[N, C, h, w]`.
pub fn extract_all(backbone: &crate::nn::Network, data: &Dataset) -> Result<Tensor> {
    let mut out: Vec<f32> = Vec::new();
    let mut shape = Vec::new();
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(FEATURE_CHUNK) {
        let f = extract_features(backbone, &data.batch(chunk)?)?;
        shape = f.shape().to_vec();
        out.extend_from_slice(f.data());
    }
    shape[0] = data.len();
    Tensor::new(shape, out)
}

/// Rows `idx` of an `[N, ...]` tensor.
pub fn gather(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let per: usize = t.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        if i >= t.shape()[0] {
            return Err(Error::InvalidArgument(format!("row {i} out of range")));
        }
        data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, data)
}

/// Trains the source detector (backbone and shared head) on `L_det`.
pub fn train_source(data: &Dataset, cfg: &AlignmentConfig) -> Result<StageOutput> {
    cfg.validate()?;
    let mut warnings = Vec::new();
    check_batch(data, cfg.batch_size, "source", &mut warnings)?;
    let det = detector_config(data, cfg)?;
    let mut backbone = build_backbone(&det, "source_backbone", sub_seed(cfg.seed, 1))?;
    let mut head = DetectorHead::build(&det, sub_seed(cfg.seed, 2))?;
    let mut adam = Adam::new(cfg.source_lr, cfg.betas_det);
    let mut sampler = Sampler::new(sub_seed(cfg.seed, 3));
    let clock = Clock::new(cfg.wall_clock);
    let mut metrics = Vec::with_capacity(cfg.source_steps);

    for step in 0..cfg.source_steps {
        let idx = sampler.batch(data.len(), cfg.batch_size);
        let images = data.batch(&idx)?;
        let gts = data.ground_truths(&idx);
        let mut tape = Tape::<f32>::new();
        let bb = backbone.bind(&mut tape, true)?;
        let hb = head.bind(&mut tape, true)?;
        let x = tape.constant(images)?;
        let f = backbone_forward(&mut tape, &backbone, &bb, x)?;
        let rpn = rpn_forward(&mut tape, &head, &hb, f)?;
        let (loss, terms) = detection_loss(&mut tape, &det, &head, &hb, &rpn, &gts)?;
        tape.backward(loss)?;
        backbone.accumulate_grads(&tape, &bb)?;
        head.accumulate_grads(&tape, &hb)?;
        let mut params = backbone.params_mut();
        params.extend(head.params_mut());
        adam.step(&mut params)?;
        backbone.zero_grads();
        head.zero_grads();
        let mut rec = MetricsRecord::new(step, "source");
        rec.loss_det = Some(terms.total());
        rec.wall_time = clock.stamp();
        metrics.push(rec);
    }

    let mut optimizers = BTreeMap::new();
    optimizers.insert("source".to_string(), adam);
    Ok(StageOutput {
        checkpoint: Checkpoint {
            config: cfg.clone(),
            detector: det,
            phase: Phase::Source,
            step: cfg.source_steps as u64,
            source_backbone: backbone,
            target_backbone: None,
            head,
            global_critic: None,
            local_critic: None,
            optimizers,
        },
        metrics,
        stats: StageStats::default(),
        warnings,
    })
}

/// Phase 1: the target backbone starts as a copy of the source backbone and
/// is trained against a patch critic on backbone features. Each outer step
/// makes `critic_steps` critic updates and one target-backbone update; the
/// source backbone and the shared head are never touched.
pub fn phase1_global_align(source: &Checkpoint, src: &Dataset, tgt: &Dataset, cfg: &AlignmentConfig) -> Result<StageOutput> {
    cfg.validate()?;
    if source.phase != Phase::Source {
        return Err(Error::PhaseOrder(format!(
            "global alignment starts from a source checkpoint, got a {} checkpoint",
            source.phase
        )));
    }
    let mut warnings = Vec::new();
    check_batch(src, cfg.batch_size, "source", &mut warnings)?;
    check_batch(tgt, cfg.batch_size, "target", &mut warnings)?;
    let det = source.detector.clone();
    let mut target = clone_network_as(&source.source_backbone, "target_backbone");
    let mut critic = build_global_critic(cfg.critic_variant, det.feat_channels, sub_seed(cfg.seed, 11))?;
    let mut critic_adam = Adam::new(cfg.alpha, cfg.betas_align);
    let mut gen_adam = Adam::new(cfg.alpha, cfg.betas_align);
    let mut sampler = Sampler::new(sub_seed(cfg.seed, 12));
    let clock = Clock::new(cfg.wall_clock);
    let source_features = extract_all(&source.source_backbone, src)?;
    let mut stats = StageStats {
        critic_detached: true,
        ..Default::default()
    };
    let mut metrics = Vec::with_capacity(cfg.phase1_steps);

    for step in 0..cfg.phase1_steps {
        let mut critic_losses = Vec::with_capacity(cfg.critic_steps);
        for _ in 0..cfg.critic_steps {
            let fs = gather(&source_features, &sampler.batch(src.len(), cfg.batch_size))?;
            let ft = extract_features(&target, &tgt.batch(&sampler.batch(tgt.len(), cfg.batch_size))?)?;
            critic.refresh_spectral_norm();
            let mut tape = Tape::<f32>::new();
            let cb = critic.bind(&mut tape, true)?;
            let vs = tape.constant(fs)?;
            let vt = tape.constant(ft)?;
            let ds = global_critic_forward(&mut tape, &critic, &cb, vs)?;
            let dt = global_critic_forward(&mut tape, &critic, &cb, vt)?;
            let loss = critic_loss(&mut tape, ds, dt)?;
            tape.backward(loss)?;
            critic_losses.push(tape.value(loss).item()? as f64);
            critic.accumulate_grads(&tape, &cb)?;
            critic_adam.step(&mut critic.params_mut())?;
            critic.zero_grads();
            stats.critic_updates += 1;
        }

        let images = tgt.batch(&sampler.batch(tgt.len(), cfg.batch_size))?;
        critic.refresh_spectral_norm();
        let mut tape = Tape::<f32>::new();
        let tb = target.bind(&mut tape, true)?;
        let cb = critic.bind(&mut tape, false)?;
        let x = tape.constant(images)?;
        let ft = backbone_forward(&mut tape, &target, &tb, x)?;
        let dt = global_critic_forward(&mut tape, &critic, &cb, ft)?;
        let gl = generator_loss(&mut tape, dt)?;
        tape.backward(gl)?;
        target.accumulate_grads(&tape, &tb)?;
        critic.accumulate_grads(&tape, &cb)?;
        stats.critic_detached &= critic.grads_are_zero();
        gen_adam.step(&mut target.params_mut())?;
        target.zero_grads();
        stats.generator_updates += 1;
        stats
            .critic_updates_between
            .push(stats.critic_updates - cfg.critic_steps * (stats.generator_updates - 1));

        let mean_critic = critic_losses.iter().sum::<f64>() / critic_losses.len() as f64;
        let mut rec = MetricsRecord::new(step, "global");
        rec.loss_critic = Some(mean_critic);
        rec.loss_generator = Some(tape.value(gl).item()? as f64);
        rec.w_estimate = Some(-mean_critic);
        rec.wall_time = clock.stamp();
        metrics.push(rec);
    }

    let mut optimizers = source.optimizers.clone();
    optimizers.insert("global_critic".to_string(), critic_adam);
    optimizers.insert("target_backbone".to_string(), gen_adam);
    Ok(StageOutput {
        checkpoint: Checkpoint {
            config: cfg.clone(),
            detector: det,
            phase: Phase::Global,
            step: cfg.phase1_steps as u64,
            source_backbone: source.source_backbone.clone(),
            target_backbone: Some(target),
            head: source.head.clone(),
            global_critic: Some(critic),
            local_critic: None,
            optimizers,
        },
        metrics,
        stats,
        warnings,
    })
}

/// Phase 2: both backbones frozen. Source and target features pass through
/// the shared RPN; their top proposals are ROI-pooled and scored by a local
/// critic whose leading gradient-reversal layer makes one backward pass
/// train the critic and push the shared head the opposite way. The source
/// batch's detection loss is then applied to the head through a second
/// optimizer after clipping its gradient norm to `clip`.
pub fn phase2_local_align(global: &Checkpoint, src: &Dataset, tgt: &Dataset, cfg: &AlignmentConfig) -> Result<StageOutput> {
    cfg.validate()?;
    if global.phase != Phase::Global {
        return Err(Error::PhaseOrder(format!(
            "local alignment needs a global-alignment checkpoint, got a {} checkpoint",
            global.phase
        )));
    }
    let target_backbone = global
        .target_backbone
        .as_ref()
        .ok_or_else(|| Error::PhaseOrder("checkpoint has no target backbone".into()))?;
    let mut warnings = Vec::new();
    check_batch(src, cfg.batch_size, "source", &mut warnings)?;
    check_batch(tgt, cfg.batch_size, "target", &mut warnings)?;
    let mut det = global.detector.clone();
    det.proposals = cfg.proposals;
    let mut head = global.head.clone();
    let mut critic = build_local_critic(cfg.critic_variant, det.feat_channels, true, sub_seed(cfg.seed, 21))?;
    let mut critic_adam = Adam::new(cfg.alpha, cfg.betas_align);
    let mut head_adam = Adam::new(cfg.alpha, cfg.betas_align);
    let mut det_adam = Adam::new(cfg.gamma * cfg.alpha, cfg.betas_det);
    let mut sampler = Sampler::new(sub_seed(cfg.seed, 22));
    let clock = Clock::new(cfg.wall_clock);
    let source_features = extract_all(&global.source_backbone, src)?;
    let target_features = extract_all(target_backbone, tgt)?;
    let mut stats = StageStats {
        critic_detached: true,
        ..Default::default()
    };
    let mut metrics = Vec::with_capacity(cfg.phase2_steps);

    for step in 0..cfg.phase2_steps {
        let is = sampler.batch(src.len(), cfg.batch_size);
        let it = sampler.batch(tgt.len(), cfg.batch_size);
        critic.refresh_spectral_norm();
        let mut tape = Tape::<f32>::new();
        let hb = head.bind(&mut tape, true)?;
        let cb = critic.bind(&mut tape, true)?;
        let fs = tape.constant(gather(&source_features, &is)?)?;
        let ft = tape.constant(gather(&target_features, &it)?)?;
        let rpn_s = rpn_forward(&mut tape, &head, &hb, fs)?;
        let rpn_t = rpn_forward(&mut tape, &head, &hb, ft)?;
        let boxes = |tape: &Tape<f32>, r: &crate::detector::RpnOutput| -> Result<Vec<Vec<BBox>>> {
            let (p, _) = select_proposals(&det, tape.value(r.objectness), tape.value(r.deltas))?;
            Ok(p.iter().map(|ps| ps.iter().map(|q| q.bbox).collect()).collect())
        };
        let bs = boxes(&tape, &rpn_s)?;
        let bt = boxes(&tape, &rpn_t)?;
        let ps = roi_pool(&mut tape, rpn_s.trunk, &bs, det.roi_size)?;
        let pt = roi_pool(&mut tape, rpn_t.trunk, &bt, det.roi_size)?;
        let ds = local_critic_forward(&mut tape, &critic, &cb, ps)?;
        let dt = local_critic_forward(&mut tape, &critic, &cb, pt)?;
        let local = local_alignment_loss(&mut tape, ds, dt)?;
        tape.backward(local)?;
        critic.accumulate_grads(&tape, &cb)?;
        critic_adam.step(&mut critic.params_mut())?;
        critic.zero_grads();
        stats.critic_updates += 1;
        head.accumulate_grads(&tape, &hb)?;
        head_adam.step(&mut head.params_mut())?;
        head.zero_grads();
        stats.generator_updates += 1;
        stats.critic_updates_between.push(1);

        let mut loss_det = None;
        if cfg.gamma > 0.0 {
            tape.zero_grads();
            let gts = src.ground_truths(&is);
            let (ld, terms) = detection_loss(&mut tape, &det, &head, &hb, &rpn_s, &gts)?;
            tape.backward(ld)?;
            head.accumulate_grads(&tape, &hb)?;
            clip_grad_norm(&mut head.params_mut(), cfg.clip)?;
            det_adam.step(&mut head.params_mut())?;
            head.zero_grads();
            loss_det = Some(terms.total());
        }

        let l = tape.value(local).item()? as f64;
        let mut rec = MetricsRecord::new(step, "local");
        rec.loss_critic = Some(l);
        rec.loss_generator = Some(-l);
        rec.w_estimate = Some(-l);
        rec.loss_det = loss_det;
        rec.wall_time = clock.stamp();
        metrics.push(rec);
    }

    let mut optimizers = global.optimizers.clone();
    optimizers.insert("local_critic".to_string(), critic_adam);
    optimizers.insert("head_align".to_string(), head_adam);
    optimizers.insert("head_det".to_string(), det_adam);
    Ok(StageOutput {
        checkpoint: Checkpoint {
            config: cfg.clone(),
            detector: det,
            phase: Phase::Local,
            step: cfg.phase2_steps as u64,
            source_backbone: global.source_backbone.clone(),
            target_backbone: global.target_backbone.clone(),
            head,
            global_critic: global.global_critic.clone(),
            local_critic: Some(critic),
            optimizers,
        },
        metrics,
        stats,
        warnings,
    })
}
