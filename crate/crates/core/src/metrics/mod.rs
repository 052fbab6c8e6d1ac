//! Evaluation metrics: mIoU, COCO mAP, depth RMSE, KITTI moderate AP, AUROC,
//! and binary mask IoU.
//!
//! Split-level variants pool statistics over all images before reducing, the
//! way the respective benchmarks do.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::annotate::{Box2D, Box3D, DepthMap, SemanticMap};
use crate::error::{Error, Result};
use crate::geometry::polygon::{box_iou_3d, Point, UprightBox};
use crate::model::Detection;
use crate::scene::ObjectClass;

mod split;

pub use split::{evaluate_split, higher_is_better, metric_name, split_fingerprint, transformed_input, InputTransform, SplitEvaluation};

pub const COCO_RECALL_POINTS: usize = 101;
pub const KITTI_RECALL_POINTS: usize = 40;
pub const KITTI_MIN_HEIGHT_PX: f64 = 25.0;
pub const KITTI_MAX_OCCLUSION: u8 = 1;
pub const KITTI_MAX_TRUNCATION: f64 = 0.3;
pub const KITTI_IOU: f64 = 0.5;

/// COCO IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub per_class: BTreeMap<String, f64>,
    pub sample_count: usize,
    pub split_fingerprint: String,
}

fn check_len(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!("{what}: {a} vs {b} values")));
    }
    Ok(())
}

/// Per-class intersection and union pixel counts, accumulated over images.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionCounts {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
}

impl ConfusionCounts {
    pub fn new(num_classes: usize) -> Self {
        Self {
            intersection: vec![0; num_classes],
            union: vec![0; num_classes],
        }
    }

    pub fn add(&mut self, pred: &SemanticMap, gt: &SemanticMap) -> Result<()> {
        if (pred.width, pred.height) != (gt.width, gt.height) {
            return Err(Error::ShapeMismatch(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.width, pred.height, gt.width, gt.height
            )));
        }
        check_len("semantic maps", pred.labels.len(), gt.labels.len())?;
        let n = self.intersection.len();
        for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
            let (p, g) = (p as usize, g as usize);
            if p >= n || g >= n {
                return Err(Error::InvalidArgument(format!("label {} outside {n} classes", p.max(g))));
            }
            if p == g {
                self.intersection[p] += 1;
                self.union[p] += 1;
            } else {
                self.union[p] += 1;
                self.union[g] += 1;
            }
        }
        Ok(())
    }

    /// Per-class IoU for classes seen in the prediction or the ground truth.
    pub fn per_class(&self) -> Vec<(usize, f64)> {
        (0..self.union.len())
            .filter(|&c| self.union[c] > 0)
            .map(|c| (c, self.intersection[c] as f64 / self.union[c] as f64))
            .collect()
    }

    /// Mean IoU; 1.0 for empty inputs.
    pub fn miou(&self) -> f64 {
        let pc = self.per_class();
        if pc.is_empty() {
            return 1.0;
        }
        pc.iter().map(|(_, v)| v).sum::<f64>() / pc.len() as f64
    }
}

/// Mean over classes present in either map of |pred ∩ gt| / |pred ∪ gt|.
pub fn miou(pred: &SemanticMap, gt: &SemanticMap, num_classes: usize) -> Result<f64> {
    let mut c = ConfusionCounts::new(num_classes);
    c.add(pred, gt)?;
    Ok(c.miou())
}

pub fn iou_xywh(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = ((a[0] + a[2]).min(b[0] + b[2]) - a[0].max(b[0])).max(0.0);
    let ih = ((a[1] + a[3]).min(b[1] + b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Detections sorted by descending score, ties by position in the input.
fn score_order<T>(items: &[T], score: impl Fn(&T) -> f64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.sort_by(|&a, &b| score(&items[b]).total_cmp(&score(&items[a])).then(a.cmp(&b)));
    idx
}

/// Outcome of one ranked detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Hit {
    Tp,
    Fp,
    /// Matched an ignored ground truth, or otherwise excluded.
    Ignored,
}

/// Greedy matching of one image: detections in score order each take the
/// unmatched ground truth with the highest overlap at or above `threshold`
/// (earliest on ties). Care ground truth is preferred over ignored ground truth.
fn greedy_match(
    order: &[usize],
    n_gt: usize,
    overlap: impl Fn(usize, usize) -> f64,
    gt_ignored: impl Fn(usize) -> bool,
    threshold: f64,
) -> Vec<(usize, Hit)> {
    let mut taken = vec![false; n_gt];
    let mut out = Vec::with_capacity(order.len());
    for &d in order {
        let mut best: Option<(bool, f64, usize)> = None;
        for g in 0..n_gt {
            if taken[g] {
                continue;
            }
            let o = overlap(d, g);
            if o < threshold {
                continue;
            }
            let care = !gt_ignored(g);
            let better = match best {
                None => true,
                Some((bc, bo, _)) => (care && !bc) || (care == bc && o > bo),
            };
            if better {
                best = Some((care, o, g));
            }
        }
        match best {
            Some((care, _, g)) => {
                taken[g] = true;
                out.push((d, if care { Hit::Tp } else { Hit::Ignored }));
            }
            None => out.push((d, Hit::Fp)),
        }
    }
    out
}

/// Ranked `(score, hit)` list across images to precision at each rank.
fn precision_recall(mut ranked: Vec<(f64, usize, usize, Hit)>, n_gt: usize) -> Vec<(f64, f64)> {
    // Score descending; ties by image then detection index.
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut out = Vec::new();
    for (_, _, _, hit) in ranked {
        match hit {
            Hit::Tp => tp += 1,
            Hit::Fp => fp += 1,
            Hit::Ignored => continue,
        }
        out.push((tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64));
    }
    out
}

/// Interpolated precision (max precision at recall >= r) averaged over
/// `recall_points`.
fn interpolated_ap(pr: &[(f64, f64)], recall_points: &[f64]) -> f64 {
    let mut envelope: Vec<f64> = pr.iter().map(|p| p.1).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut sum = 0.0;
    for &r in recall_points {
        // Recall is non-decreasing along the ranking.
        let k = pr.partition_point(|p| p.0 < r - 1e-12);
        if k < pr.len() {
            sum += envelope[k];
        }
    }
    sum / recall_points.len() as f64
}

pub fn coco_recall_points() -> Vec<f64> {
    (0..COCO_RECALL_POINTS).map(|i| i as f64 / 100.0).collect()
}

pub fn kitti_recall_points() -> Vec<f64> {
    (1..=KITTI_RECALL_POINTS).map(|i| i as f64 / KITTI_RECALL_POINTS as f64).collect()
}

/// One image's detections and ground truth.
pub type DetectionImage<'a> = (&'a [Detection], &'a [Box2D]);

/// COCO mAP pooled over images, with per-class AP (averaged over IoU
/// thresholds) for classes that have ground truth. Classes without ground
/// truth are left out of the mean; with no ground truth at all the result is
/// 1.0 if there are no detections either and 0.0 otherwise.
pub fn coco_map_images(images: &[DetectionImage]) -> (f64, BTreeMap<ObjectClass, f64>) {
    let thresholds = coco_iou_thresholds();
    let recall = coco_recall_points();
    let mut per_class = BTreeMap::new();
    for class in ObjectClass::ALL {
        let n_gt: usize = images
            .iter()
            .map(|(_, g)| g.iter().filter(|b| b.class == class).count())
            .sum();
        if n_gt == 0 {
            continue;
        }
        let mut ap_sum = 0.0;
        for &t in &thresholds {
            let mut ranked = Vec::new();
            for (img, (dets, gts)) in images.iter().enumerate() {
                let d: Vec<&Detection> = dets.iter().filter(|d| d.class == class).collect();
                let g: Vec<&Box2D> = gts.iter().filter(|b| b.class == class).collect();
                let order = score_order(&d, |x| x.score);
                for (k, hit) in greedy_match(&order, g.len(), |a, b| iou_xywh(&d[a].bbox, &g[b].bbox), |_| false, t) {
                    ranked.push((d[k].score, img, k, hit));
                }
            }
            ap_sum += interpolated_ap(&precision_recall(ranked, n_gt), &recall);
        }
        per_class.insert(class, ap_sum / thresholds.len() as f64);
    }
    if per_class.is_empty() {
        let any_det = images.iter().any(|(d, _)| !d.is_empty());
        return (if any_det { 0.0 } else { 1.0 }, per_class);
    }
    let mean = per_class.values().sum::<f64>() / per_class.len() as f64;
    (mean, per_class)
}

/// COCO mAP of a single image.
pub fn coco_map(dets: &[Detection], gts: &[Box2D]) -> f64 {
    coco_map_images(&[(dets, gts)]).0
}

/// Squared-error sum and valid-pixel count for pooling RMSE over images.
pub fn depth_sq_error(pred: &DepthMap, gt: &DepthMap) -> Result<(f64, usize)> {
    if (pred.width, pred.height) != (gt.width, gt.height) {
        return Err(Error::ShapeMismatch(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    check_len("depth maps", pred.depth_m.len(), gt.depth_m.len())?;
    let mut sum = 0.0;
    let mut n = 0;
    for (i, (&p, &g)) in pred.depth_m.iter().zip(&gt.depth_m).enumerate() {
        if gt.is_valid(i) {
            let d = f64::from(p) - f64::from(g);
            sum += d * d;
            n += 1;
        }
    }
    Ok((sum, n))
}

/// Root mean square error in metres over ground-truth-valid pixels.
pub fn depth_rmse(pred: &DepthMap, gt: &DepthMap) -> Result<f64> {
    let (sum, n) = depth_sq_error(pred, gt)?;
    if n == 0 {
        return Err(Error::NoValidPixels);
    }
    Ok((sum / n as f64).sqrt())
}

/// Upright box of a KITTI label in a z-up frame: footprint in the camera's
/// x-z plane, vertical extent from the bottom face upward.
pub fn kitti_upright(b: &Box3D) -> UprightBox {
    let [h, w, l] = b.dimensions;
    UprightBox {
        center: Point::new(b.location[0], b.location[2]),
        length: l,
        width: w,
        // Camera y points down, so a yaw about it turns x toward -z.
        yaw: -b.rotation_y,
        bottom: -b.location[1],
        height: h,
    }
}

pub fn kitti_iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    box_iou_3d(&kitti_upright(a), &kitti_upright(b))
}

/// Ground truth counted at moderate difficulty.
pub fn is_moderate(b: &Box3D) -> bool {
    b.bbox2d[3] - b.bbox2d[1] >= KITTI_MIN_HEIGHT_PX
        && b.occlusion <= KITTI_MAX_OCCLUSION
        && b.truncation <= KITTI_MAX_TRUNCATION
}

pub type Box3DImage<'a> = (&'a [Box3D], &'a [Box3D]);

/// KITTI moderate AP pooled over images, per class with moderate ground
/// truth, 3D IoU >= 0.5 and 40-point interpolation. Ground truth outside
/// moderate is ignored: detections matching it count as neither TP nor FP,
/// and so do unmatched detections shorter than the height threshold.
/// With no moderate ground truth the result is 1.0 when no counted
/// detection remains and 0.0 otherwise.
pub fn kitti_ap_moderate_images(images: &[Box3DImage]) -> (f64, BTreeMap<ObjectClass, f64>) {
    let recall = kitti_recall_points();
    let mut per_class = BTreeMap::new();
    let mut stray_fp = false;
    for class in ObjectClass::ALL {
        let mut ranked = Vec::new();
        let mut n_gt = 0;
        for (img, (dets, gts)) in images.iter().enumerate() {
            let d: Vec<&Box3D> = dets.iter().filter(|b| b.class == class).collect();
            let g: Vec<&Box3D> = gts.iter().filter(|b| b.class == class).collect();
            n_gt += g.iter().filter(|b| is_moderate(b)).count();
            let score = |b: &&Box3D| b.score.unwrap_or(0.0);
            let order = score_order(&d, score);
            for (k, hit) in greedy_match(&order, g.len(), |a, b| kitti_iou_3d(d[a], g[b]), |j| !is_moderate(g[j]), KITTI_IOU) {
                let hit = if hit == Hit::Fp && d[k].bbox2d[3] - d[k].bbox2d[1] < KITTI_MIN_HEIGHT_PX {
                    Hit::Ignored
                } else {
                    hit
                };
                ranked.push((score(&d[k]), img, k, hit));
            }
        }
        if n_gt == 0 {
            stray_fp |= ranked.iter().any(|r| r.3 == Hit::Fp);
            continue;
        }
        per_class.insert(class, interpolated_ap(&precision_recall(ranked, n_gt), &recall));
    }
    if per_class.is_empty() {
        return (if stray_fp { 0.0 } else { 1.0 }, per_class);
    }
    let mean = per_class.values().sum::<f64>() / per_class.len() as f64;
    (mean, per_class)
}

pub fn kitti_ap_moderate(dets: &[Box3D], gts: &[Box3D]) -> f64 {
    kitti_ap_moderate_images(&[(dets, gts)]).0
}

/// Probability that a positive outscores a negative, ties counting half.
/// Computed by sorting; equal to exhaustive pair counting.
pub fn auroc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::EmptyScoreSet);
    }
    if pos.iter().chain(neg).any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    let mut n: Vec<f64> = neg.to_vec();
    n.sort_by(f64::total_cmp);
    // Twice the Mann-Whitney statistic, exact in integers.
    let mut twice: u128 = 0;
    for &p in pos {
        let below = n.partition_point(|&x| x < p);
        let not_above = n.partition_point(|&x| x <= p);
        twice += 2 * below as u128 + (not_above - below) as u128;
    }
    Ok(twice as f64 / (2 * pos.len() as u128 * neg.len() as u128) as f64)
}

/// |pred ∩ gt| / |pred ∪ gt|, 1.0 when both are empty.
pub fn mask_iou(pred: &[bool], gt: &[bool]) -> Result<f64> {
    check_len("masks", pred.len(), gt.len())?;
    let inter = pred.iter().zip(gt).filter(|(a, b)| **a && **b).count();
    let union = pred.iter().zip(gt).filter(|(a, b)| **a || **b).count();
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}
