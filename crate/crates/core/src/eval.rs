//! Detection evaluation: all-point interpolated AP and mAP.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::alignment::Checkpoint;
use crate::data::Dataset;
use crate::detector::{detect, Detection};
use crate::error::{Error, Result};

pub use crate::detector::{iou, BBox};

/// Detection chunk size used by [`evaluate`].
const EVAL_CHUNK: usize = 32;

/// A scored box attached to the image it was predicted on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredBox {
    pub image: usize,
    pub bbox: BBox,
    pub score: f64,
}

/// Outcome of the greedy matching for one class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMatch {
    /// Hit flags in descending-score order.
    pub hits: Vec<bool>,
    pub num_gt: usize,
}

/// Greedy matching: detections in descending score order (stable on ties),
/// each claims the unmatched ground truth box on the same image with the
/// highest IoU, provided that IoU is at least `iou_threshold`.
pub fn match_detections(dets: &[ScoredBox], gts: &[(usize, BBox)], iou_threshold: f64) -> ClassMatch {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut taken = vec![false; gts.len()];
    let mut hits = Vec::with_capacity(dets.len());
    for i in order {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, (img, g)) in gts.iter().enumerate() {
            if *img != d.image || taken[j] {
                continue;
            }
            let o = iou(&d.bbox, g);
            if o >= iou_threshold && best.map_or(true, |(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
        }
        hits.push(best.is_some());
    }
    ClassMatch { hits, num_gt: gts.len() }
}

/// Area under the precision envelope of a hit sequence.
pub fn ap_from_hits(hits: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(hits.len());
    let mut precision = Vec::with_capacity(hits.len());
    for (k, &h) in hits.iter().enumerate() {
        tp += h as usize;
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev) * p;
        prev = *r;
    }
    Some(ap)
}

/// All-point interpolated AP for one class; `None` when there is no ground
/// truth.
pub fn average_precision(dets: &[ScoredBox], gts: &[(usize, BBox)], iou_threshold: f64) -> Option<f64> {
    let m = match_detections(dets, gts, iou_threshold);
    ap_from_hits(&m.hits, m.num_gt)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub ground_truth: usize,
    pub predictions: usize,
    pub matched: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// AP per class id; classes without ground truth are absent.
    pub per_class_ap: BTreeMap<usize, f64>,
    pub map: f64,
    pub counts: BTreeMap<usize, ClassCounts>,
    pub iou_threshold: f64,
}

impl EvalReport {
    /// Recomputes the mean over the reported per-class APs.
    pub fn recomputed_map(&self) -> f64 {
        if self.per_class_ap.is_empty() {
            return 0.0;
        }
        self.per_class_ap.values().sum::<f64>() / self.per_class_ap.len() as f64
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Scores per-image detections against the dataset's annotations.
pub fn evaluate_detections(
    detections: &[Vec<Detection>],
    data: &Dataset,
    num_classes: usize,
    iou_threshold: f64,
) -> Result<EvalReport> {
    if detections.len() != data.len() {
        return Err(Error::InvalidArgument(format!(
            "{} detection lists for {} images",
            detections.len(),
            data.len()
        )));
    }
    if !(0.0..=1.0).contains(&iou_threshold) {
        return Err(Error::InvalidArgument(format!("iou threshold {iou_threshold} outside [0, 1]")));
    }
    let mut per_class_ap = BTreeMap::new();
    let mut counts = BTreeMap::new();
    for class in 0..num_classes {
        let dets: Vec<ScoredBox> = detections
            .iter()
            .enumerate()
            .flat_map(|(i, ds)| {
                ds.iter().filter(|d| d.class_id == class).map(move |d| ScoredBox {
                    image: i,
                    bbox: d.bbox,
                    score: d.score,
                })
            })
            .collect();
        let gts: Vec<(usize, BBox)> = data
            .samples
            .iter()
            .enumerate()
            .flat_map(|(i, s)| {
                s.boxes
                    .iter()
                    .zip(&s.labels)
                    .filter(|(_, &l)| l == class)
                    .map(move |(b, _)| (i, *b))
            })
            .collect();
        let m = match_detections(&dets, &gts, iou_threshold);
        counts.insert(
            class,
            ClassCounts {
                ground_truth: gts.len(),
                predictions: dets.len(),
                matched: m.hits.iter().filter(|&&h| h).count(),
            },
        );
        if let Some(ap) = ap_from_hits(&m.hits, m.num_gt) {
            per_class_ap.insert(class, ap);
        }
    }
    let mut report = EvalReport {
        per_class_ap,
        map: 0.0,
        counts,
        iou_threshold,
    };
    report.map = report.recomputed_map();
    Ok(report)
}

/// Runs the checkpoint's detector over `data` and scores it. `target`
/// selects the target backbone (falls back to the source backbone before
/// global alignment).
pub fn evaluate(ckpt: &Checkpoint, data: &Dataset, target: bool, iou_threshold: f64) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let backbone = ckpt.backbone_for(target);
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut detections = Vec::with_capacity(data.len());
    for chunk in idx.chunks(EVAL_CHUNK) {
        detections.extend(detect(&ckpt.detector, backbone, &ckpt.head, &data.batch(chunk)?)?);
    }
    evaluate_detections(&detections, data, ckpt.detector.num_classes, iou_threshold)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::{gen_shapes_dataset, DomainParams};

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn sb(image: usize, bbox: BBox, score: f64) -> ScoredBox {
        ScoredBox { image, bbox, score }
    }

    /// AP as the mean over ground truth of the best precision at or after
    /// each hit.
    fn ap_oracle(hits: &[bool], num_gt: usize) -> f64 {
        let prec: Vec<f64> = (0..hits.len())
            .map(|k| hits[..=k].iter().filter(|&&h| h).count() as f64 / (k + 1) as f64)
            .collect();
        let mut total = 0.0;
        for k in 0..hits.len() {
            if hits[k] {
                total += prec[k..].iter().cloned().fold(0.0, f64::max);
            }
        }
        total / num_gt as f64
    }

    #[test]
    fn perfect_and_empty() {
        let g = vec![(0, bx(0.0, 0.0, 10.0, 10.0)), (1, bx(5.0, 5.0, 20.0, 20.0))];
        let d: Vec<ScoredBox> = g.iter().map(|&(i, b)| sb(i, b, 0.9)).collect();
        assert_eq!(average_precision(&d, &g, 0.5), Some(1.0));
        assert_eq!(average_precision(&[], &g, 0.5), Some(0.0));
        let miss = [sb(0, bx(30.0, 30.0, 40.0, 40.0), 0.9)];
        assert_eq!(average_precision(&miss, &g[..1], 0.5), Some(0.0));
        assert_eq!(average_precision(&d, &[], 0.5), None);
    }

    #[test]
    fn hand_traced_three_detections() {
        let g = vec![(0, bx(0.0, 0.0, 10.0, 10.0)), (0, bx(20.0, 20.0, 30.0, 30.0))];
        let d = [
            sb(0, bx(0.0, 0.0, 10.0, 10.0), 0.9),
            sb(0, bx(40.0, 40.0, 50.0, 50.0), 0.8),
            sb(0, bx(20.0, 20.0, 30.0, 31.0), 0.7),
        ];
        let m = match_detections(&d, &g, 0.5);
        assert_eq!(m.hits, vec![true, false, true]);
        // recall .5 at precision 1, then recall 1 at precision 2/3
        let want = 0.5 * 1.0 + 0.5 * (2.0 / 3.0);
        let ap = average_precision(&d, &g, 0.5).unwrap();
        assert!((ap - want).abs() < 1e-12);
        assert!((ap - ap_oracle(&m.hits, 2)).abs() < 1e-12);
    }

    #[test]
    fn duplicate_detection_counts_once() {
        let g = vec![(0, bx(0.0, 0.0, 10.0, 10.0))];
        let d = [sb(0, bx(0.0, 0.0, 10.0, 10.0), 0.9), sb(0, bx(0.0, 0.0, 10.0, 11.0), 0.8)];
        assert_eq!(match_detections(&d, &g, 0.5).hits, vec![true, false]);
    }

    #[test]
    fn greedy_prefers_highest_iou() {
        let g = vec![(0, bx(0.0, 0.0, 10.0, 10.0)), (0, bx(2.0, 0.0, 12.0, 10.0))];
        let d = [sb(0, bx(2.0, 0.0, 12.0, 10.0), 0.9), sb(0, bx(0.0, 0.0, 10.0, 10.0), 0.8)];
        assert_eq!(match_detections(&d, &g, 0.5).hits, vec![true, true]);
    }

    #[test]
    fn random_cases_match_oracle_and_ignore_score_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..300 {
            let r = |rng: &mut ChaCha8Rng| {
                let x = rng.gen_range(0.0..40.0);
                let y = rng.gen_range(0.0..40.0);
                bx(x, y, x + rng.gen_range(4.0..15.0), y + rng.gen_range(4.0..15.0))
            };
            let g: Vec<(usize, BBox)> = (0..rng.gen_range(1..5)).map(|_| (rng.gen_range(0..2), r(&mut rng))).collect();
            let d: Vec<ScoredBox> = (0..rng.gen_range(0..8))
                .map(|_| {
                    let (img, b) = if rng.gen_bool(0.5) {
                        g[rng.gen_range(0..g.len())]
                    } else {
                        (rng.gen_range(0..2), r(&mut rng))
                    };
                    sb(img, b, rng.gen_range(0.0..1.0))
                })
                .collect();
            let m = match_detections(&d, &g, 0.5);
            let ap = average_precision(&d, &g, 0.5).unwrap();
            assert!((ap - ap_oracle(&m.hits, g.len())).abs() < 1e-12);
            let warped: Vec<ScoredBox> = d.iter().map(|x| sb(x.image, x.bbox, (3.0 * x.score).exp() - 7.0)).collect();
            assert_eq!(average_precision(&warped, &g, 0.5).unwrap(), ap);
        }
    }

    #[test]
    fn report_from_ground_truth_and_nothing() {
        let data = gen_shapes_dataset(10, 2, &DomainParams::clear()).unwrap();
        let perfect: Vec<Vec<Detection>> = data
            .samples
            .iter()
            .map(|s| {
                s.boxes
                    .iter()
                    .zip(&s.labels)
                    .map(|(&bbox, &class_id)| Detection { bbox, class_id, score: 1.0 })
                    .collect()
            })
            .collect();
        let r = evaluate_detections(&perfect, &data, 3, 0.5).unwrap();
        assert_eq!(r.map, 1.0);
        let gt: usize = r.counts.values().map(|c| c.ground_truth).sum();
        assert_eq!(gt, data.samples.iter().map(|s| s.boxes.len()).sum::<usize>());
        let empty = vec![Vec::new(); data.len()];
        assert_eq!(evaluate_detections(&empty, &data, 3, 0.5).unwrap().map, 0.0);
        assert!(evaluate_detections(&empty[1..], &data, 3, 0.5).is_err());
    }

    #[test]
    fn classes_without_ground_truth_are_excluded() {
        let data = gen_shapes_dataset(10, 2, &DomainParams::clear()).unwrap();
        let dets = vec![Vec::new(); data.len()];
        let r = evaluate_detections(&dets, &data, 5, 0.5).unwrap();
        assert_eq!(r.per_class_ap.len(), 3);
        assert_eq!(r.counts.len(), 5);
        assert_eq!(r.map, r.recomputed_map());
    }
}
