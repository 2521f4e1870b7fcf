//! The desk-scale two-stage detector: backbone, shared RPN and ROI head.

use serde::{Deserialize, Serialize};

use super::boxes::{anchor_grid, decode, encode, iou, nms, Anchor, BBox, Detection};
use crate::autodiff::{RoiRegion, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{build_network, Bound, LayerSpec, Network, DEFAULT_SLOPE};
use crate::tensor::{Real, Tensor};

/// Transition point of the smooth-L1 box losses.
pub const SMOOTH_L1_BETA: f64 = 1.0 / 9.0;

/// Pixel stride of the backbone's output grid (three stride-2 blocks).
pub const FEATURE_STRIDE: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub in_channels: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub feat_channels: usize,
    pub hidden: usize,
    pub anchor_size: f64,
    pub roi_size: usize,
    /// Proposals kept per image (m).
    pub proposals: usize,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub freeze_first_block: bool,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            image_size: 64,
            num_classes: 3,
            feat_channels: 64,
            hidden: 128,
            anchor_size: 16.0,
            roi_size: 3,
            proposals: 16,
            score_threshold: 0.05,
            nms_iou: 0.5,
            freeze_first_block: true,
        }
    }
}

impl DetectorConfig {
    pub fn grid(&self) -> usize {
        self.image_size / FEATURE_STRIDE
    }

    pub fn anchors(&self) -> Vec<Anchor> {
        anchor_grid(self.grid(), self.grid(), FEATURE_STRIDE as f64, self.anchor_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % FEATURE_STRIDE != 0 {
            return Err(Error::Config(format!(
                "image size {} must be a positive multiple of {FEATURE_STRIDE}",
                self.image_size
            )));
        }
        if self.num_classes == 0 || self.proposals == 0 || self.roi_size == 0 {
            return Err(Error::Config("classes, proposals and roi size must be positive".into()));
        }
        Ok(())
    }
}

/// Four 3x3 conv + LeakyReLU blocks; the first three halve the resolution.
pub fn backbone_specs(cfg: &DetectorConfig) -> Vec<LayerSpec> {
    let c = cfg.feat_channels;
    let widths = [cfg.in_channels, (c / 4).max(1), (c / 2).max(1), c, c];
    let strides = [2, 2, 2, 1];
    let mut specs = Vec::new();
    for i in 0..4 {
        specs.push(LayerSpec::conv(widths[i], widths[i + 1], 3, strides[i], 1));
        specs.push(LayerSpec::leaky_relu(DEFAULT_SLOPE));
    }
    specs
}

pub fn build_backbone(cfg: &DetectorConfig, name: &str, seed: u64) -> Result<Network> {
    let mut net = build_network(name, &backbone_specs(cfg), seed)?;
    if cfg.freeze_first_block {
        net.freeze_leading(1);
    }
    Ok(net)
}

/// The parameters shared by source and target detectors: the RPN trunk
/// (local mapping), its 1x1 objectness/delta head and the ROI classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorHead {
    pub rpn_trunk: Network,
    pub rpn_head: Network,
    pub classifier: Network,
}

#[derive(Clone, Debug)]
pub struct HeadBinding {
    pub trunk: Bound,
    pub rpn: Bound,
    pub classifier: Bound,
}

impl DetectorHead {
    pub fn build(cfg: &DetectorConfig, seed: u64) -> Result<Self> {
        let c = cfg.feat_channels;
        let r = cfg.roi_size;
        let rpn_trunk = build_network(
            "rpn_trunk",
            &[LayerSpec::conv(c, c, 3, 1, 1), LayerSpec::leaky_relu(DEFAULT_SLOPE)],
            seed.wrapping_add(1),
        )?;
        let rpn_head = build_network("rpn_head", &[LayerSpec::conv(c, 5, 1, 1, 0)], seed.wrapping_add(2))?;
        let classifier = build_network(
            "classifier",
            &[
                LayerSpec::flatten(),
                LayerSpec::linear(c * r * r, cfg.hidden),
                LayerSpec::leaky_relu(DEFAULT_SLOPE),
                LayerSpec::linear(cfg.hidden, 5 * cfg.num_classes + 1),
            ],
            seed.wrapping_add(3),
        )?;
        Ok(Self {
            rpn_trunk,
            rpn_head,
            classifier,
        })
    }

    fn nets(&self) -> [&Network; 3] {
        [&self.rpn_trunk, &self.rpn_head, &self.classifier]
    }

    fn nets_mut(&mut self) -> [&mut Network; 3] {
        [&mut self.rpn_trunk, &mut self.rpn_head, &mut self.classifier]
    }

    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, track: bool) -> Result<HeadBinding> {
        Ok(HeadBinding {
            trunk: self.rpn_trunk.bind(tape, track)?,
            rpn: self.rpn_head.bind(tape, track)?,
            classifier: self.classifier.bind(tape, track)?,
        })
    }

    pub fn accumulate_grads<T: Real>(&mut self, tape: &Tape<T>, b: &HeadBinding) -> Result<()> {
        self.rpn_trunk.accumulate_grads(tape, &b.trunk)?;
        self.rpn_head.accumulate_grads(tape, &b.rpn)?;
        self.classifier.accumulate_grads(tape, &b.classifier)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.nets_mut().into_iter().flat_map(|n| n.params_mut()).collect()
    }

    pub fn zero_grads(&mut self) {
        self.nets_mut().into_iter().for_each(|n| n.zero_grads());
    }

    pub fn grads_are_zero(&self) -> bool {
        self.nets().iter().all(|n| n.grads_are_zero())
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.nets().iter().flat_map(|n| n.named_tensors()).collect()
    }

    pub fn load_named(&mut self, lookup: &dyn Fn(&str) -> Option<Tensor>) -> Result<()> {
        for n in self.nets_mut() {
            n.load_named(lookup)?;
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> u64 {
        self.nets()
            .iter()
            .fold(0u64, |h, n| h.rotate_left(17) ^ n.fingerprint())
    }
}

/// Tape handles produced by the RPN for a batch.
#[derive(Clone, Copy, Debug)]
pub struct RpnOutput {
    /// Local-mapping features `[N, C, h, w]` that ROIs are pooled from.
    pub trunk: Var,
    /// Objectness logits `[N, 1, h, w]`, one anchor per cell.
    pub objectness: Var,
    /// Anchor deltas `[N, 4, h, w]`.
    pub deltas: Var,
}

/// A ranked region proposal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub bbox: BBox,
    pub objectness: f64,
}

/// Ground truth of one image.
#[derive(Clone, Copy, Debug)]
pub struct GroundTruth<'a> {
    pub boxes: &'a [BBox],
    pub labels: &'a [usize],
}

pub fn backbone_forward<T: Real>(tape: &mut Tape<T>, net: &Network, bound: &Bound, images: Var) -> Result<Var> {
    let s = tape.shape(images);
    if s.len() != 4 {
        return Err(Error::shape("backbone_forward", format!("expected [N,C,H,W], got {s:?}")));
    }
    if let Some(c) = net.input_channels() {
        if c != s[1] {
            return Err(Error::shape(
                "backbone_forward",
                format!("backbone expects {c} channels, images have {}", s[1]),
            ));
        }
    }
    net.forward(tape, bound, images)
}

pub fn rpn_forward<T: Real>(tape: &mut Tape<T>, head: &DetectorHead, b: &HeadBinding, features: Var) -> Result<RpnOutput> {
    let trunk = head.rpn_trunk.forward(tape, &b.trunk, features)?;
    let out = head.rpn_head.forward(tape, &b.rpn, trunk)?;
    let objectness = tape.narrow(out, 1, 0, 1)?;
    let deltas = tape.narrow(out, 1, 1, 4)?;
    Ok(RpnOutput {
        trunk,
        objectness,
        deltas,
    })
}

/// Top-`m` proposals per image from raw RPN values. Anchors are decoded,
/// clipped to the image (at least one pixel per side) and ranked by
/// objectness; ties keep row-major anchor order. When `m` exceeds the
/// anchor count every anchor is returned and the second value is true.
pub fn select_proposals<T: Real>(
    cfg: &DetectorConfig,
    objectness: &Tensor<T>,
    deltas: &Tensor<T>,
) -> Result<(Vec<Vec<Proposal>>, bool)> {
    let s = objectness.shape();
    if s.len() != 4 || s[1] != 1 || deltas.shape() != [s[0], 4, s[2], s[3]] {
        return Err(Error::shape(
            "select_proposals",
            format!("objectness {s:?} / deltas {:?}", deltas.shape()),
        ));
    }
    let (n, h, w) = (s[0], s[2], s[3]);
    let a = h * w;
    let anchors = anchor_grid(h, w, FEATURE_STRIDE as f64, cfg.anchor_size);
    let size = (w * FEATURE_STRIDE) as f64;
    let size_y = (h * FEATURE_STRIDE) as f64;
    let truncated = cfg.proposals > a;
    let keep = cfg.proposals.min(a);
    let od = objectness.data();
    let dd = deltas.data();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let logits: Vec<f64> = (0..a).map(|k| od[i * a + k].as_f64()).collect();
        let mut order: Vec<usize> = (0..a).collect();
        order.sort_by(|&p, &q| logits[q].total_cmp(&logits[p]));
        let props = order[..keep]
            .iter()
            .map(|&k| {
                let d = [0, 1, 2, 3].map(|c| dd[(i * 4 + c) * a + k].as_f64());
                Proposal {
                    bbox: decode(d, &anchors[k]).clip(size, size_y, 1.0),
                    objectness: crate::autodiff::sigmoid(logits[k]),
                }
            })
            .collect();
        out.push(props);
    }
    Ok((out, truncated))
}

/// Feature-grid region of an image-space box: cells from `floor(x1/s)` to
/// `ceil(x2/s)`, clamped to the grid, at least one cell wide.
pub fn box_region(b: &BBox, batch: usize, grid_h: usize, grid_w: usize) -> RoiRegion {
    let s = FEATURE_STRIDE as f64;
    let span = |lo: f64, hi: f64, lim: usize| {
        let a = ((lo / s).floor().max(0.0) as usize).min(lim - 1);
        let z = ((hi / s).ceil().max(0.0) as usize).min(lim).max(a + 1);
        (a, z)
    };
    let (x0, x1) = span(b.x1, b.x2, grid_w);
    let (y0, y1) = span(b.y1, b.y2, grid_h);
    RoiRegion { batch, y0, y1, x0, x1 }
}

/// Quantized ROI max pooling of image-space boxes, `boxes[i]` belonging to
/// batch entry `i`.
pub fn roi_pool<T: Real>(tape: &mut Tape<T>, features: Var, boxes: &[Vec<BBox>], output: usize) -> Result<Var> {
    let s = tape.shape(features).to_vec();
    if s.len() != 4 || s[0] != boxes.len() {
        return Err(Error::shape(
            "roi_pool",
            format!("{} box lists for features {s:?}", boxes.len()),
        ));
    }
    let (gh, gw) = (s[2], s[3]);
    let regions: Vec<RoiRegion> = boxes
        .iter()
        .enumerate()
        .flat_map(|(i, bs)| bs.iter().map(move |b| box_region(b, i, gh, gw)))
        .collect();
    tape.roi_pool(features, &regions, output, output)
}

/// Class logits `[P, K+1]` (background first) and class-specific deltas
/// `[P, 4K]`.
pub fn classifier_forward<T: Real>(
    tape: &mut Tape<T>,
    head: &DetectorHead,
    b: &HeadBinding,
    roi_features: Var,
) -> Result<(Var, Var)> {
    let out = head.classifier.forward(tape, &b.classifier, roi_features)?;
    let width = tape.shape(out)[1];
    let k = (width - 1) / 5;
    let logits = tape.narrow(out, 1, 0, k + 1)?;
    let deltas = tape.narrow(out, 1, k + 1, 4 * k)?;
    Ok((logits, deltas))
}

/// Anchor labels for one image: an anchor is positive when its best IoU
/// with a ground-truth box reaches 0.5, and each box also claims its single
/// best anchor. Positives carry the index of their matched box.
pub fn assign_anchors(anchors: &[Anchor], gt: &[BBox]) -> Vec<Option<usize>> {
    let boxes: Vec<BBox> = anchors.iter().map(|a| a.to_box()).collect();
    let mut out: Vec<Option<usize>> = boxes
        .iter()
        .map(|a| {
            let mut best: Option<(usize, f64)> = None;
            for (g, b) in gt.iter().enumerate() {
                let v = iou(a, b);
                if best.map_or(true, |(_, bv)| v > bv) {
                    best = Some((g, v));
                }
            }
            best.filter(|&(_, v)| v >= 0.5).map(|(g, _)| g)
        })
        .collect();
    for (g, b) in gt.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (k, a) in boxes.iter().enumerate() {
            let v = iou(a, b);
            if best.map_or(true, |(_, bv)| v > bv) {
                best = Some((k, v));
            }
        }
        if let Some((k, v)) = best {
            if v > 0.0 {
                out[k] = Some(g);
            }
        }
    }
    out
}

/// Values of the four detection-loss terms, for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetLossTerms {
    pub rpn_objectness: f64,
    pub rpn_regression: f64,
    pub roi_classification: f64,
    pub roi_regression: f64,
}

impl DetLossTerms {
    pub fn total(&self) -> f64 {
        self.rpn_objectness + self.rpn_regression + self.roi_classification + self.roi_regression
    }
}

/// `L_det` for a batch: objectness BCE over all anchors, smooth-L1 on
/// positive anchors' deltas, ROI softmax CE, and smooth-L1 on foreground
/// ROIs' class-specific deltas, with unit weights. Regression terms are
/// normalized by their positive counts. The ROI set is the current top-`m`
/// proposals plus the ground-truth boxes; an ROI is foreground when its
/// best IoU with a ground-truth box reaches 0.5.
pub fn detection_loss<T: Real>(
    tape: &mut Tape<T>,
    cfg: &DetectorConfig,
    head: &DetectorHead,
    b: &HeadBinding,
    rpn: &RpnOutput,
    gts: &[GroundTruth<'_>],
) -> Result<(Var, DetLossTerms)> {
    let s = tape.shape(rpn.objectness).to_vec();
    let (n, h, w) = (s[0], s[2], s[3]);
    if gts.len() != n {
        return Err(Error::shape("detection_loss", format!("{} annotations for {n} images", gts.len())));
    }
    for g in gts {
        if g.boxes.len() != g.labels.len() {
            return Err(Error::InvalidArgument("box and label counts differ".into()));
        }
        if let Some(&l) = g.labels.iter().find(|&&l| l >= cfg.num_classes) {
            return Err(Error::InvalidArgument(format!("label {l} out of range")));
        }
    }
    let a = h * w;
    let anchors = anchor_grid(h, w, FEATURE_STRIDE as f64, cfg.anchor_size);
    let mut obj_t = vec![0.0; n * a];
    let mut del_t = vec![0.0; n * 4 * a];
    let mut del_w = vec![0.0; n * 4 * a];
    let mut num_pos = 0usize;
    for (i, g) in gts.iter().enumerate() {
        for (k, m) in assign_anchors(&anchors, g.boxes).into_iter().enumerate() {
            if let Some(gi) = m {
                num_pos += 1;
                obj_t[i * a + k] = 1.0;
                let enc = encode(&g.boxes[gi], &anchors[k]);
                for c in 0..4 {
                    del_t[(i * 4 + c) * a + k] = enc[c];
                    del_w[(i * 4 + c) * a + k] = 1.0;
                }
            }
        }
    }
    let obj_flat = tape.reshape(rpn.objectness, &[n * a])?;
    let l_obj = tape.sigmoid_bce(obj_flat, &obj_t)?;
    let del_target = tape.constant(Tensor::from_f64(vec![n, 4, h, w], &del_t)?)?;
    let l_rreg = tape.smooth_l1_weighted(rpn.deltas, del_target, &del_w, SMOOTH_L1_BETA, num_pos.max(1) as f64)?;

    let (props, _) = select_proposals(cfg, tape.value(rpn.objectness), tape.value(rpn.deltas))?;
    let k = cfg.num_classes;
    let mut rois: Vec<Vec<BBox>> = Vec::with_capacity(n);
    let mut labels = Vec::new();
    let mut reg_t = Vec::new();
    let mut reg_w = Vec::new();
    let mut num_fg = 0usize;
    for (i, g) in gts.iter().enumerate() {
        let boxes: Vec<BBox> = props[i].iter().map(|p| p.bbox).chain(g.boxes.iter().copied()).collect();
        for r in &boxes {
            let mut best: Option<(usize, f64)> = None;
            for (gi, gb) in g.boxes.iter().enumerate() {
                let v = iou(r, gb);
                if best.map_or(true, |(_, bv)| v > bv) {
                    best = Some((gi, v));
                }
            }
            let mut t = vec![0.0; 4 * k];
            let mut wv = vec![0.0; 4 * k];
            match best.filter(|&(_, v)| v >= 0.5) {
                Some((gi, _)) => {
                    let c = g.labels[gi];
                    labels.push(c + 1);
                    num_fg += 1;
                    let enc = encode(&g.boxes[gi], &Anchor::from_box(r));
                    t[4 * c..4 * c + 4].copy_from_slice(&enc);
                    wv[4 * c..4 * c + 4].fill(1.0);
                }
                None => labels.push(0),
            }
            reg_t.extend(t);
            reg_w.extend(wv);
        }
        rois.push(boxes);
    }
    let pooled = roi_pool(tape, rpn.trunk, &rois, cfg.roi_size)?;
    let (logits, deltas) = classifier_forward(tape, head, b, pooled)?;
    let l_cls = tape.softmax_cross_entropy(logits, &labels)?;
    let p = labels.len();
    let reg_target = tape.constant(Tensor::from_f64(vec![p, 4 * k], &reg_t)?)?;
    let l_creg = tape.smooth_l1_weighted(deltas, reg_target, &reg_w, SMOOTH_L1_BETA, num_fg.max(1) as f64)?;

    let terms = DetLossTerms {
        rpn_objectness: tape.value(l_obj).item()?.as_f64(),
        rpn_regression: tape.value(l_rreg).item()?.as_f64(),
        roi_classification: tape.value(l_cls).item()?.as_f64(),
        roi_regression: tape.value(l_creg).item()?.as_f64(),
    };
    let s1 = tape.add(l_obj, l_rreg)?;
    let s2 = tape.add(l_cls, l_creg)?;
    let total = tape.add(s1, s2)?;
    Ok((total, terms))
}

/// Inference from backbone features `[N, C, h, w]`: proposals, ROI
/// classification, per-class box decoding, score threshold and per-class
/// NMS. Detections of each image are sorted by descending score.
pub fn detect_from_features(cfg: &DetectorConfig, head: &DetectorHead, features: &Tensor) -> Result<Vec<Vec<Detection>>> {
    let mut tape = Tape::<f32>::new();
    let hb = head.bind(&mut tape, false)?;
    let f = tape.constant(features.clone())?;
    let rpn = rpn_forward(&mut tape, head, &hb, f)?;
    let (props, _) = select_proposals(cfg, tape.value(rpn.objectness), tape.value(rpn.deltas))?;
    let boxes: Vec<Vec<BBox>> = props.iter().map(|ps| ps.iter().map(|p| p.bbox).collect()).collect();
    let pooled = roi_pool(&mut tape, rpn.trunk, &boxes, cfg.roi_size)?;
    let (logits, deltas) = classifier_forward(&mut tape, head, &hb, pooled)?;
    let lg = tape.value(logits).to_f64_vec();
    let dl = tape.value(deltas).to_f64_vec();
    let k = cfg.num_classes;
    let size = cfg.image_size as f64;
    let mut out = Vec::with_capacity(boxes.len());
    let mut row = 0;
    for bs in &boxes {
        let mut per_class: Vec<Vec<Detection>> = vec![Vec::new(); k];
        for r in bs {
            let z = &lg[row * (k + 1)..(row + 1) * (k + 1)];
            let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
            let total: f64 = e.iter().sum();
            for c in 0..k {
                let score = e[c + 1] / total;
                if score < cfg.score_threshold {
                    continue;
                }
                let d = &dl[row * 4 * k + 4 * c..row * 4 * k + 4 * c + 4];
                let bbox = decode([d[0], d[1], d[2], d[3]], &Anchor::from_box(r)).clip(size, size, 1.0);
                per_class[c].push(Detection {
                    bbox,
                    class_id: c,
                    score,
                });
            }
            row += 1;
        }
        let mut dets: Vec<Detection> = per_class.iter().flat_map(|d| nms(d, cfg.nms_iou)).collect();
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        out.push(dets);
    }
    Ok(out)
}

/// Backbone features of a batch, without gradient tracking.
pub fn extract_features(backbone: &Network, images: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::<f32>::new();
    let b = backbone.bind(&mut tape, false)?;
    let x = tape.constant(images.clone())?;
    let f = backbone_forward(&mut tape, backbone, &b, x)?;
    Ok(tape.value(f).clone())
}

/// Full pipeline on a batch of images `[N, C, H, W]`.
pub fn detect(cfg: &DetectorConfig, backbone: &Network, head: &DetectorHead, images: &Tensor) -> Result<Vec<Vec<Detection>>> {
    let f = extract_features(backbone, images)?;
    detect_from_features(cfg, head, &f)
}
