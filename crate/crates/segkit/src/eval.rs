//! COCO-style mask (or box) mAP: greedy per-image matching with
//! crowd-ignore semantics, 101-point interpolated average precision, and the
//! AP@0.50:0.95 mean over ten IoU thresholds.
//!
//! Determinism rules, fixed so parallel evaluation is bit-stable: detections
//! are processed in descending score with ties broken by input index; IoU
//! ties during matching go to the lower ground-truth index; cross-image
//! pooling keeps (image order, within-image rank) for equal scores; and
//! per-category results combine in category-id order.

use crate::coco::{Annotation, Dataset, Detection};
use crate::mask::{box_iou, mask_iou, rle_decode, BBox, BinaryMask};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("detection references unknown {kind} id {id}")]
    UnknownId { kind: &'static str, id: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IouKind {
    Mask,
    Box,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalParams {
    /// Strictly increasing IoU thresholds; matching uses IoU ≥ threshold.
    pub iou_thresholds: Vec<f64>,
    /// Recall sample points for interpolated AP.
    pub recall_points: Vec<f64>,
    /// Per-image cap on detections, applied by descending score before
    /// matching.
    pub max_dets: usize,
    pub iou_kind: IouKind,
}

impl Default for EvalParams {
    fn default() -> Self {
        EvalParams {
            // 0.50:0.05:0.95 — ten thresholds.
            iou_thresholds: (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect(),
            // 0.00:0.01:1.00 — 101 points.
            recall_points: (0..=100).map(|i| i as f64 / 100.0).collect(),
            max_dets: 100,
            iou_kind: IouKind::Mask,
        }
    }
}

/// Result of matching one detection at one threshold. `det_index` refers to
/// the caller's detection slice; outcomes come back in processing order
/// (descending score). An ignored detection overlapped a crowd region and
/// counts as neither true nor false positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchOutcome {
    pub det_index: usize,
    pub matched_gt: Option<usize>,
    pub ignored: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean AP over the IoU thresholds (the headline AP@0.50:0.95 number
    /// under default params).
    pub map: f64,
    /// AP per IoU threshold, keyed by the threshold formatted to two
    /// decimals ("0.50" … "0.95").
    pub ap_per_threshold: BTreeMap<String, f64>,
    /// Mean AP over thresholds per category id (stringified for JSON);
    /// categories without ground truth are absent.
    pub per_category: BTreeMap<String, f64>,
}

/// IoU between one detection and one ground-truth instance. Crowd regions
/// use intersection over the detection's own area (a detection fully inside
/// a big crowd region scores 1), everything else intersection over union.
fn pair_iou(
    kind: IouKind,
    det_mask: Option<&BinaryMask>,
    det_box: &BBox,
    gt: &Annotation,
    gt_mask: Option<&BinaryMask>,
) -> f64 {
    match kind {
        IouKind::Mask => {
            let (dm, gm) = match (det_mask, gt_mask) {
                (Some(d), Some(g)) => (d, g),
                _ => return 0.0,
            };
            if gt.iscrowd {
                let inter: u64 = dm
                    .as_bytes()
                    .iter()
                    .zip(gm.as_bytes())
                    .map(|(&a, &b)| (a & b) as u64)
                    .sum();
                let det_area = dm.area();
                if det_area == 0 {
                    0.0
                } else {
                    inter as f64 / det_area as f64
                }
            } else {
                mask_iou(dm, gm).unwrap_or(0.0)
            }
        }
        IouKind::Box => {
            if gt.iscrowd {
                let ix = (det_box.x + det_box.w).min(gt.bbox.x + gt.bbox.w)
                    - det_box.x.max(gt.bbox.x);
                let iy = (det_box.y + det_box.h).min(gt.bbox.y + gt.bbox.h)
                    - det_box.y.max(gt.bbox.y);
                let inter = ix.max(0.0) * iy.max(0.0);
                if det_box.area() <= 0.0 {
                    0.0
                } else {
                    inter / det_box.area()
                }
            } else {
                box_iou(det_box, &gt.bbox)
            }
        }
    }
}

/// Processing order for a detection list: descending score, ties by input
/// index, truncated to `max_dets`.
fn ranked_order(dets: &[Detection], max_dets: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b].score.partial_cmp(&dets[a].score).expect("scores are finite").then(a.cmp(&b))
    });
    order.truncate(max_dets);
    order
}

/// Greedy matching given a precomputed IoU matrix (`iou[det][gt]`, crowd
/// entries already using the crowd formula).
fn match_with_matrix(
    order: &[usize],
    dets: &[Detection],
    gts: &[&Annotation],
    iou: &[Vec<f64>],
    thr: f64,
) -> Vec<MatchOutcome> {
    let mut gt_used = vec![false; gts.len()];
    let mut outcomes = Vec::with_capacity(order.len());
    for &d in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if gt.iscrowd || gt_used[g] || gt.category_id != dets[d].category_id {
                continue;
            }
            let v = iou[d][g];
            // Strict `>` keeps the lowest gt index on IoU ties.
            if v >= thr && best.map_or(true, |(_, bi)| v > bi) {
                best = Some((g, v));
            }
        }
        match best {
            Some((g, _)) => {
                gt_used[g] = true;
                outcomes.push(MatchOutcome { det_index: d, matched_gt: Some(g), ignored: false });
            }
            None => {
                let ignored = gts.iter().enumerate().any(|(g, gt)| {
                    gt.iscrowd && gt.category_id == dets[d].category_id && iou[d][g] >= thr
                });
                outcomes.push(MatchOutcome { det_index: d, matched_gt: None, ignored });
            }
        }
    }
    outcomes
}

fn decode_dets(dets: &[Detection], kind: IouKind) -> Vec<Option<BinaryMask>> {
    match kind {
        IouKind::Mask => dets.iter().map(|d| rle_decode(&d.mask).ok()).collect(),
        IouKind::Box => vec![None; dets.len()],
    }
}

fn decode_gts(gts: &[&Annotation], kind: IouKind) -> Vec<Option<BinaryMask>> {
    match kind {
        IouKind::Mask => gts.iter().map(|g| rle_decode(&g.mask).ok()).collect(),
        IouKind::Box => vec![None; gts.len()],
    }
}

fn iou_matrix(
    dets: &[Detection],
    det_masks: &[Option<BinaryMask>],
    gts: &[&Annotation],
    gt_masks: &[Option<BinaryMask>],
    kind: IouKind,
) -> Vec<Vec<f64>> {
    dets.iter()
        .enumerate()
        .map(|(d, det)| {
            gts.iter()
                .enumerate()
                .map(|(g, gt)| {
                    pair_iou(kind, det_masks[d].as_ref(), &det.bbox, gt, gt_masks[g].as_ref())
                })
                .collect()
        })
        .collect()
}

/// Matches one image's detections against its ground truth at one IoU
/// threshold. Detections and ground truth must belong to the same image;
/// cross-category pairs never match.
pub fn match_image(
    dets: &[Detection],
    gts: &[Annotation],
    thr: f64,
    p: &EvalParams,
) -> Vec<MatchOutcome> {
    let gt_refs: Vec<&Annotation> = gts.iter().collect();
    let det_masks = decode_dets(dets, p.iou_kind);
    let gt_masks = decode_gts(&gt_refs, p.iou_kind);
    let iou = iou_matrix(dets, &det_masks, &gt_refs, &gt_masks, p.iou_kind);
    let order = ranked_order(dets, p.max_dets);
    match_with_matrix(&order, dets, &gt_refs, &iou, thr)
}

/// 101-point interpolated AP. `tp_sequence` holds the true-positive flags of
/// the counted (non-ignored) detections sorted by descending score; ignored
/// detections must already be absent. Returns 0 when there is no ground
/// truth.
pub fn average_precision(tp_sequence: &[bool], total_gt: usize, p: &EvalParams) -> f64 {
    if total_gt == 0 {
        return 0.0;
    }
    let n = tp_sequence.len();
    let mut precision = Vec::with_capacity(n);
    let mut recall = Vec::with_capacity(n);
    let mut tp = 0usize;
    for (i, &is_tp) in tp_sequence.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / total_gt as f64);
    }
    // Right-to-left envelope makes precision non-increasing in recall.
    for i in (0..n.saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    // Sample the envelope at each recall point: the first index whose recall
    // reaches the point, or precision 0 where the recall is never attained.
    let mut sum = 0.0;
    let mut i = 0usize;
    for &q in &p.recall_points {
        while i < n && recall[i] < q {
            i += 1;
        }
        if i < n {
            sum += precision[i];
        }
    }
    sum / p.recall_points.len() as f64
}

/// Full dataset evaluation: per category and per threshold, matches are
/// pooled across images and turned into interpolated AP; per-threshold APs
/// average over categories that have at least one non-crowd ground-truth
/// instance, and `map` averages those over thresholds.
pub fn evaluate(dets: &[Detection], gt: &Dataset, p: &EvalParams) -> Result<EvalReport, EvalError> {
    let image_ids: HashSet<u64> = gt.images.iter().map(|im| im.id).collect();
    let cat_ids: HashSet<u32> = gt.categories.iter().map(|c| c.id).collect();
    for d in dets {
        if !image_ids.contains(&d.image_id) {
            return Err(EvalError::UnknownId { kind: "image", id: d.image_id });
        }
        if !cat_ids.contains(&d.category_id) {
            return Err(EvalError::UnknownId { kind: "category", id: d.category_id as u64 });
        }
    }

    // Categories take part only with ≥1 non-crowd instance; crowd-only
    // categories have no recall denominator.
    let mut cat_order: Vec<u32> = gt.categories.iter().map(|c| c.id).collect();
    cat_order.sort_unstable();
    let evaluable: Vec<u32> = cat_order
        .into_iter()
        .filter(|&cid| {
            gt.annotations.iter().any(|a| a.category_id == cid && !a.iscrowd)
        })
        .collect();

    let per_cat_aps: Vec<(u32, Vec<f64>)> = evaluable
        .par_iter()
        .map(|&cid| {
            let mut pooled: Vec<Vec<(f64, bool)>> =
                vec![Vec::new(); p.iou_thresholds.len()];
            let mut total_gt = 0usize;
            for image in &gt.images {
                let gts_ci: Vec<&Annotation> = gt
                    .annotations
                    .iter()
                    .filter(|a| a.image_id == image.id && a.category_id == cid)
                    .collect();
                let dets_ci: Vec<Detection> = dets
                    .iter()
                    .filter(|d| d.image_id == image.id && d.category_id == cid)
                    .cloned()
                    .collect();
                total_gt += gts_ci.iter().filter(|g| !g.iscrowd).count();
                if dets_ci.is_empty() {
                    continue;
                }
                let det_masks = decode_dets(&dets_ci, p.iou_kind);
                let gt_masks = decode_gts(&gts_ci, p.iou_kind);
                let iou = iou_matrix(&dets_ci, &det_masks, &gts_ci, &gt_masks, p.iou_kind);
                let order = ranked_order(&dets_ci, p.max_dets);
                for (ti, &thr) in p.iou_thresholds.iter().enumerate() {
                    for o in match_with_matrix(&order, &dets_ci, &gts_ci, &iou, thr) {
                        if o.matched_gt.is_some() {
                            pooled[ti].push((dets_ci[o.det_index].score, true));
                        } else if !o.ignored {
                            pooled[ti].push((dets_ci[o.det_index].score, false));
                        }
                    }
                }
            }
            let aps: Vec<f64> = pooled
                .into_iter()
                .map(|mut seq| {
                    // Stable sort: equal scores keep (image order, rank) from
                    // the pooling pass.
                    seq.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("scores are finite"));
                    let flags: Vec<bool> = seq.iter().map(|&(_, tp)| tp).collect();
                    average_precision(&flags, total_gt, p)
                })
                .collect();
            (cid, aps)
        })
        .collect();

    let mut ap_per_threshold = BTreeMap::new();
    let mut per_category = BTreeMap::new();
    let n_cats = per_cat_aps.len();
    for (ti, &thr) in p.iou_thresholds.iter().enumerate() {
        let ap = if n_cats == 0 {
            0.0
        } else {
            per_cat_aps.iter().map(|(_, aps)| aps[ti]).sum::<f64>() / n_cats as f64
        };
        ap_per_threshold.insert(format!("{thr:.2}"), ap);
    }
    for (cid, aps) in &per_cat_aps {
        per_category
            .insert(cid.to_string(), aps.iter().sum::<f64>() / p.iou_thresholds.len() as f64);
    }
    let map = if n_cats == 0 {
        0.0
    } else {
        p.iou_thresholds
            .iter()
            .map(|thr| ap_per_threshold[&format!("{thr:.2}")])
            .sum::<f64>()
            / p.iou_thresholds.len() as f64
    };
    Ok(EvalReport { map, ap_per_threshold, per_category })
}
