//! Average precision at a fixed IoU threshold and dataset-level evaluation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::boxes::{iou, nms, priority_order, BoundingBox, Detection};
use super::{DetectError, Result};
use crate::tensor::Tensor;

pub const EVAL_IOU: f64 = 0.5;
pub const NMS_IOU: f64 = 0.5;
pub const SCORE_THRESHOLD: f64 = 0.05;

/// Detection or ground truth tagged with the image it belongs to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tagged<T> {
    pub image: usize,
    pub item: T,
}

/// Greedy matching in priority order: each detection takes the unmatched
/// same-class ground truth in its image with the highest IoU, if that IoU
/// reaches `iou_thr`. Returns a TP flag per detection (in input order) and
/// the number of matched ground truths.
pub fn match_detections(
    dets: &[Tagged<Detection>],
    gts: &[Tagged<BoundingBox>],
    iou_thr: f64,
) -> Result<(Vec<bool>, usize)> {
    let plain: Vec<Detection> = dets.iter().map(|d| d.item).collect();
    let mut used = vec![false; gts.len()];
    let mut tp = vec![false; dets.len()];
    let mut matched = 0;
    for i in priority_order(&plain) {
        let d = &dets[i];
        let mut best: Option<(f64, usize)> = None;
        for (j, gt) in gts.iter().enumerate() {
            if used[j] || gt.image != d.image || gt.item.class != d.item.bbox.class {
                continue;
            }
            let v = iou(&d.item.bbox, &gt.item)?;
            if best.is_none_or(|(bv, _)| v > bv) {
                best = Some((v, j));
            }
        }
        if let Some((v, j)) = best {
            if v >= iou_thr {
                used[j] = true;
                tp[i] = true;
                matched += 1;
            }
        }
    }
    Ok((tp, matched))
}

/// All-point interpolated AP for one class; `None` when the class has no ground truth.
pub fn average_precision(
    dets: &[Tagged<Detection>],
    gts: &[Tagged<BoundingBox>],
    class: usize,
    iou_thr: f64,
) -> Result<Option<f64>> {
    let dets: Vec<Tagged<Detection>> = dets.iter().filter(|d| d.item.bbox.class == class).copied().collect();
    let gts: Vec<Tagged<BoundingBox>> = gts.iter().filter(|g| g.item.class == class).copied().collect();
    if gts.is_empty() {
        return Ok(None);
    }
    let (tp, _) = match_detections(&dets, &gts, iou_thr)?;
    let plain: Vec<Detection> = dets.iter().map(|d| d.item).collect();
    let n_gt = gts.len() as f64;

    // precision/recall after each detection in priority order
    let mut recall = vec![0.0];
    let mut precision = vec![0.0];
    let (mut ctp, mut cfp) = (0usize, 0usize);
    for i in priority_order(&plain) {
        if tp[i] {
            ctp += 1;
        } else {
            cfp += 1;
        }
        recall.push(ctp as f64 / n_gt);
        precision.push(ctp as f64 / (ctp + cfp) as f64);
    }
    recall.push(1.0);
    precision.push(0.0);
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    for i in 1..recall.len() {
        if recall[i] != recall[i - 1] {
            ap += (recall[i] - recall[i - 1]) * precision[i];
        }
    }
    Ok(Some(ap))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// AP per class; `None` for classes without ground truth.
    pub per_class_ap: Vec<Option<f64>>,
    /// Unweighted mean over classes that have ground truth.
    pub map: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

/// Scores a set of per-image detections against per-image ground truth.
pub fn score_detections(
    per_image: &[Vec<Detection>],
    truths: &[Vec<BoundingBox>],
    num_classes: usize,
) -> Result<EvalResult> {
    if per_image.len() != truths.len() {
        return Err(DetectError::Eval(format!(
            "{} prediction lists for {} images",
            per_image.len(),
            truths.len()
        )));
    }
    let dets: Vec<Tagged<Detection>> = per_image
        .iter()
        .enumerate()
        .flat_map(|(image, ds)| ds.iter().map(move |&item| Tagged { image, item }))
        .collect();
    let gts: Vec<Tagged<BoundingBox>> = truths
        .iter()
        .enumerate()
        .flat_map(|(image, bs)| bs.iter().map(move |&item| Tagged { image, item }))
        .collect();
    if let Some(bad) = gts.iter().find(|g| g.item.class >= num_classes) {
        return Err(DetectError::Eval(format!("ground-truth class {} out of range", bad.item.class)));
    }

    let per_class_ap = (0..num_classes)
        .map(|c| average_precision(&dets, &gts, c, EVAL_IOU))
        .collect::<Result<Vec<_>>>()?;
    let present: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    let map = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    let (tp, matched) = match_detections(&dets, &gts, EVAL_IOU)?;
    let true_positives = tp.iter().filter(|&&t| t).count();
    Ok(EvalResult {
        per_class_ap,
        map,
        true_positives,
        false_positives: dets.len() - true_positives,
        false_negatives: gts.len() - matched,
    })
}

/// Anything that maps an image to raw (pre-threshold, pre-NMS) detections.
pub trait Predict: Sync {
    fn predict(&self, image: &Tensor<f64>) -> Result<Vec<Detection>>;
    fn num_classes(&self) -> usize;
}

/// Predict → score threshold → NMS → per-class AP → mAP. Images are processed
/// independently; the result does not depend on scheduling.
pub fn evaluate<P: Predict>(
    model: &P,
    images: &[Tensor<f64>],
    truths: &[Vec<BoundingBox>],
    score_threshold: f64,
) -> Result<EvalResult> {
    if images.is_empty() {
        return Err(DetectError::Eval("empty evaluation set".into()));
    }
    let per_image = images
        .par_iter()
        .map(|img| {
            let raw: Vec<Detection> = model
                .predict(img)?
                .into_iter()
                .filter(|d| d.score >= score_threshold)
                .collect();
            nms(&raw, NMS_IOU)
        })
        .collect::<Result<Vec<_>>>()?;
    score_detections(&per_image, truths, model.num_classes())
}
