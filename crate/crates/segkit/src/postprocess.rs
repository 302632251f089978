//! Detection post-processing: score calibration from mask-quality estimates,
//! soft-NMS, and test-time-augmentation (TTA) mapping plus fusion.
//!
//! Soft-NMS follows the classic formulation: repeatedly emit the
//! highest-scoring remaining detection and decay the scores of same-category
//! overlaps — gaussian `exp(−IoU²/σ)` or linear `1−IoU` past a threshold —
//! discarding anything that falls below `score_floor`. TTA fusion is
//! concatenate-then-soft-NMS; each surviving detection keeps its own mask
//! (no mask averaging).

use crate::coco::Detection;
use crate::mask::{box_iou, mask_iou, rle_decode, rle_encode, BinaryMask};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PostprocessError {
    #[error("detection mask extent {got_h}x{got_w} inconsistent with the {want_h}x{want_w} view of the transform")]
    ShapeError { got_h: u32, got_w: u32, want_h: u32, want_w: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NmsMethod {
    Gaussian,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SoftNmsParams {
    pub method: NmsMethod,
    /// Gaussian decay width; only read when `method` is gaussian.
    pub sigma: f64,
    /// Linear decay kicks in above this overlap; only read when linear.
    pub iou_threshold: f64,
    /// Detections whose score drops (or starts) strictly below this are
    /// discarded.
    pub score_floor: f64,
    pub max_keep: usize,
    /// Suppress on mask IoU instead of box IoU.
    pub mask_iou_suppression: bool,
}

impl Default for SoftNmsParams {
    fn default() -> Self {
        SoftNmsParams {
            method: NmsMethod::Gaussian,
            sigma: 0.5,
            iou_threshold: 0.5,
            score_floor: 0.001,
            max_keep: 100,
            mask_iou_suppression: false,
        }
    }
}

/// Folds each detection's mask-quality estimate into its score:
/// `score × mask_iou_pred` where the estimate is present, pass-through where
/// it is not. Order and every other field are preserved.
pub fn calibrate_scores(dets: &[Detection]) -> Vec<Detection> {
    dets.iter()
        .map(|d| {
            let mut d = d.clone();
            if let Some(mi) = d.mask_iou_pred {
                d.score *= mi;
            }
            d
        })
        .collect()
}

/// Soft-NMS over one image's detections. Emission order is descending
/// (rescored) score; score ties break toward the lower original input index.
/// Only same-category pairs decay each other.
pub fn soft_nms(dets: &[Detection], p: &SoftNmsParams) -> Vec<Detection> {
    // Dense masks are only needed for the mask-IoU suppression variant.
    let dense: Vec<Option<BinaryMask>> = if p.mask_iou_suppression {
        dets.iter().map(|d| rle_decode(&d.mask).ok()).collect()
    } else {
        Vec::new()
    };
    let overlap = |a: usize, b: usize, da: &Detection, db: &Detection| -> f64 {
        if p.mask_iou_suppression {
            match (&dense[a], &dense[b]) {
                (Some(ma), Some(mb)) => mask_iou(ma, mb).unwrap_or(0.0),
                _ => 0.0,
            }
        } else {
            box_iou(&da.bbox, &db.bbox)
        }
    };

    let mut active: Vec<(usize, Detection)> = dets
        .iter()
        .enumerate()
        .filter(|(_, d)| d.score >= p.score_floor)
        .map(|(i, d)| (i, d.clone()))
        .collect();
    let mut out = Vec::new();
    while !active.is_empty() && out.len() < p.max_keep {
        let best_pos = active
            .iter()
            .enumerate()
            .min_by(|(_, (ia, da)), (_, (ib, db))| {
                db.score.partial_cmp(&da.score).expect("scores are finite").then(ia.cmp(ib))
            })
            .map(|(pos, _)| pos)
            .expect("active is nonempty");
        let (winner_idx, winner) = active.swap_remove(best_pos);
        for (idx, d) in active.iter_mut() {
            if d.category_id != winner.category_id {
                continue;
            }
            let iou = overlap(winner_idx, *idx, &winner, d);
            let factor = match p.method {
                NmsMethod::Gaussian => (-iou * iou / p.sigma).exp(),
                NmsMethod::Linear => {
                    if iou > p.iou_threshold {
                        1.0 - iou
                    } else {
                        1.0
                    }
                }
            };
            d.score *= factor;
        }
        active.retain(|(_, d)| d.score >= p.score_floor);
        out.push(winner);
    }
    out
}

/// One test-time view: scale the original image by `scale`, then optionally
/// mirror it. `original_extent` is (height, width) before any transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TtaTransform {
    pub scale: f64,
    pub hflipped: bool,
    pub original_extent: (u32, u32),
}

impl TtaTransform {
    pub fn identity(original_extent: (u32, u32)) -> Self {
        TtaTransform { scale: 1.0, hflipped: false, original_extent }
    }

    /// Extent of the transformed view: each side rounded from
    /// `original × scale`.
    pub fn view_extent(&self) -> (u32, u32) {
        let (h, w) = self.original_extent;
        (
            ((h as f64 * self.scale).round() as u32).max(1),
            ((w as f64 * self.scale).round() as u32).max(1),
        )
    }

    /// Stable view name used to key per-view results files: `s<scale>` plus
    /// `_flip` when mirrored, e.g. `s1.5_flip`.
    pub fn view_name(&self) -> String {
        if self.hflipped {
            format!("s{}_flip", self.scale)
        } else {
            format!("s{}", self.scale)
        }
    }
}

/// Maps detections expressed in the view frame of `t` back to the original
/// frame: boxes are divided by the scale then un-flipped; masks are resized
/// to the original extent (bilinear + 0.5 threshold) then un-flipped. Scores
/// pass through. Fails if a mask's extent is not the view extent of `t`.
pub fn inverse_map(
    dets: &[Detection],
    t: &TtaTransform,
) -> Result<Vec<Detection>, PostprocessError> {
    let (oh, ow) = t.original_extent;
    let (vh, vw) = t.view_extent();
    dets.iter()
        .map(|d| {
            if (d.mask.height, d.mask.width) != (vh, vw) {
                return Err(PostprocessError::ShapeError {
                    got_h: d.mask.height,
                    got_w: d.mask.width,
                    want_h: vh,
                    want_w: vw,
                });
            }
            let mut bbox = d.bbox.scale(1.0 / t.scale);
            if t.hflipped {
                bbox = bbox.hflip(ow as f64);
            }
            let mut dense = rle_decode(&d.mask)
                .expect("stored RLE is canonical")
                .resize(oh, ow)
                .expect("original extent is nonzero");
            if t.hflipped {
                dense = dense.hflip();
            }
            Ok(Detection { bbox, mask: rle_encode(&dense), ..d.clone() })
        })
        .collect()
}

/// Exact algebraic inverse of [`inverse_map`]: takes detections in the
/// original frame into the view frame of `t` (flip first, then scale).
/// Used to synthesize view-frame detections for detectors that reason in
/// original coordinates, and to test the round trip.
pub fn forward_map(
    dets: &[Detection],
    t: &TtaTransform,
) -> Result<Vec<Detection>, PostprocessError> {
    let (oh, ow) = t.original_extent;
    let (vh, vw) = t.view_extent();
    dets.iter()
        .map(|d| {
            if (d.mask.height, d.mask.width) != (oh, ow) {
                return Err(PostprocessError::ShapeError {
                    got_h: d.mask.height,
                    got_w: d.mask.width,
                    want_h: oh,
                    want_w: ow,
                });
            }
            let mut bbox = d.bbox;
            let mut dense = rle_decode(&d.mask).expect("stored RLE is canonical");
            if t.hflipped {
                bbox = bbox.hflip(ow as f64);
                dense = dense.hflip();
            }
            bbox = bbox.scale(t.scale);
            let dense = dense.resize(vh, vw).expect("view extent is nonzero");
            Ok(Detection { bbox, mask: rle_encode(&dense), ..d.clone() })
        })
        .collect()
}

/// Fuses per-view detections of one image: inverse-map every group into the
/// original frame, concatenate (group order, then within-group order), and
/// run soft-NMS. Each emitted detection keeps the mask of its own view.
pub fn tta_merge(
    groups: &[(Vec<Detection>, TtaTransform)],
    p: &SoftNmsParams,
) -> Result<Vec<Detection>, PostprocessError> {
    let mut all = Vec::new();
    for (dets, t) in groups {
        all.extend(inverse_map(dets, t)?);
    }
    Ok(soft_nms(&all, p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{BBox, BinaryMask, Rect};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det(bbox: BBox, score: f64, mask_h: u32, mask_w: u32) -> Detection {
        let mut m = BinaryMask::new(mask_h, mask_w);
        let rect = Rect {
            x: bbox.x as u32,
            y: bbox.y as u32,
            width: (bbox.w as u32).max(1).min(mask_w - bbox.x as u32),
            height: (bbox.h as u32).max(1).min(mask_h - bbox.y as u32),
        };
        m.fill_rect(rect);
        Detection {
            image_id: 1,
            category_id: 1,
            bbox,
            mask: rle_encode(&m),
            score,
            mask_iou_pred: None,
        }
    }

    #[test]
    fn calibrate_multiplies_only_when_estimate_present() {
        let mut a = det(BBox::new(0.0, 0.0, 4.0, 4.0), 0.9, 16, 16);
        a.mask_iou_pred = Some(0.8);
        let b = det(BBox::new(8.0, 8.0, 4.0, 4.0), 0.7, 16, 16);
        let mut c = det(BBox::new(4.0, 4.0, 4.0, 4.0), 0.6, 16, 16);
        c.mask_iou_pred = Some(1.0);
        let out = calibrate_scores(&[a.clone(), b.clone(), c.clone()]);
        assert!((out[0].score - 0.72).abs() < 1e-12);
        assert_eq!(out[1].score, 0.7);
        assert_eq!(out[2].score, 0.6);
        // Order and other fields untouched.
        assert_eq!(out[1], b);
        assert_eq!(out.len(), 3);
    }

    #[test]
    fn calibrate_preserves_ranking_under_common_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut dets: Vec<Detection> = (0..20)
            .map(|i| {
                let mut d = det(BBox::new(i as f64, 0.0, 3.0, 3.0), rng.gen_range(0.0..1.0), 32, 32);
                d.mask_iou_pred = Some(0.6);
                d
            })
            .collect();
        dets.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        let out = calibrate_scores(&dets);
        for pair in out.windows(2) {
            assert!(pair[0].score >= pair[1].score);
        }
    }

    #[test]
    fn soft_nms_coincident_pair_gaussian_analytic() {
        let a = det(BBox::new(2.0, 2.0, 6.0, 6.0), 0.9, 16, 16);
        let b = det(BBox::new(2.0, 2.0, 6.0, 6.0), 0.8, 16, 16);
        let p = SoftNmsParams { sigma: 0.5, ..Default::default() };
        let out = soft_nms(&[a, b], &p);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].score, 0.9);
        // IoU = 1 → factor exp(−1/0.5) = e⁻².
        assert!((out[1].score - 0.8 * (-2.0f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn soft_nms_passes_through_singletons_and_disjoint_sets() {
        let p = SoftNmsParams::default();
        let single = vec![det(BBox::new(1.0, 1.0, 4.0, 4.0), 0.77, 16, 16)];
        assert_eq!(soft_nms(&single, &p), single);

        let disjoint = vec![
            det(BBox::new(0.0, 0.0, 4.0, 4.0), 0.9, 16, 16),
            det(BBox::new(8.0, 8.0, 4.0, 4.0), 0.5, 16, 16),
            det(BBox::new(0.0, 8.0, 4.0, 4.0), 0.7, 16, 16),
        ];
        let out = soft_nms(&disjoint, &p);
        // Emission is by descending score but every byte of each detection
        // survives untouched (zero-overlap decay factor is exactly 1).
        assert_eq!(out.len(), 3);
        assert_eq!(out[0], disjoint[0]);
        assert_eq!(out[1], disjoint[2]);
        assert_eq!(out[2], disjoint[1]);
    }

    #[test]
    fn soft_nms_small_sigma_acts_like_hard_nms() {
        let p = SoftNmsParams { sigma: 1e-6, score_floor: 0.01, ..Default::default() };
        let dets = vec![
            det(BBox::new(2.0, 2.0, 6.0, 6.0), 0.9, 16, 16),
            det(BBox::new(2.0, 2.0, 6.0, 6.0), 0.8, 16, 16),
            det(BBox::new(2.0, 2.0, 6.0, 6.0), 0.85, 16, 16),
        ];
        let out = soft_nms(&dets, &p);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].score, 0.9);
    }

    #[test]
    fn soft_nms_linear_decay_and_threshold() {
        // IoU of these two boxes is exactly 0.5: 4×8 ∩ 4×8 shifted by 4 → 16/32...
        // use (0,0,8,4) vs (4,0,8,4): inter 4×4=16, union 32+32−16=48 → 1/3.
        let a = det(BBox::new(0.0, 0.0, 8.0, 4.0), 0.9, 16, 16);
        let b = det(BBox::new(4.0, 0.0, 8.0, 4.0), 0.6, 16, 16);
        let iou = crate::mask::box_iou(&a.bbox, &b.bbox);
        assert!((iou - 1.0 / 3.0).abs() < 1e-12);

        // Below the threshold: untouched.
        let lenient = SoftNmsParams {
            method: NmsMethod::Linear,
            iou_threshold: 0.5,
            ..Default::default()
        };
        let out = soft_nms(&[a.clone(), b.clone()], &lenient);
        assert_eq!(out[1].score, 0.6);

        // Above the threshold: scaled by (1 − IoU).
        let strict = SoftNmsParams {
            method: NmsMethod::Linear,
            iou_threshold: 0.25,
            ..Default::default()
        };
        let out = soft_nms(&[a, b], &strict);
        assert!((out[1].score - 0.6 * (1.0 - iou)).abs() < 1e-12);
    }

    #[test]
    fn soft_nms_ties_break_toward_lower_input_index() {
        let a = det(BBox::new(0.0, 0.0, 4.0, 4.0), 0.8, 16, 16);
        let b = det(BBox::new(8.0, 0.0, 4.0, 4.0), 0.8, 16, 16);
        let out = soft_nms(&[a.clone(), b.clone()], &SoftNmsParams::default());
        assert_eq!(out[0], a);
        assert_eq!(out[1], b);
    }

    #[test]
    fn soft_nms_respects_max_keep_and_floor() {
        let dets: Vec<Detection> = (0..10)
            .map(|i| det(BBox::new(i as f64 * 5.0, 0.0, 4.0, 4.0), 0.9 - i as f64 * 0.05, 64, 64))
            .collect();
        let p = SoftNmsParams { max_keep: 4, ..Default::default() };
        assert_eq!(soft_nms(&dets, &p).len(), 4);

        let floor = SoftNmsParams { score_floor: 0.7, ..Default::default() };
        let kept = soft_nms(&dets, &floor);
        assert!(kept.iter().all(|d| d.score >= 0.7));
        assert_eq!(kept.len(), 5); // scores 0.9, 0.85, 0.8, 0.75, 0.7
    }

    #[test]
    fn soft_nms_only_decays_same_category() {
        let mut a = det(BBox::new(2.0, 2.0, 6.0, 6.0), 0.9, 16, 16);
        let mut b = det(BBox::new(2.0, 2.0, 6.0, 6.0), 0.8, 16, 16);
        a.category_id = 1;
        b.category_id = 2;
        let out = soft_nms(&[a, b], &SoftNmsParams::default());
        assert_eq!(out[1].score, 0.8);
    }

    #[test]
    fn soft_nms_mask_iou_variant_uses_mask_overlap() {
        // Identical boxes but disjoint masks: box suppression decays,
        // mask suppression does not.
        let mut ma = BinaryMask::new(8, 8);
        ma.fill_rect(Rect { x: 0, y: 0, width: 8, height: 4 });
        let mut mb = BinaryMask::new(8, 8);
        mb.fill_rect(Rect { x: 0, y: 4, width: 8, height: 4 });
        let mk = |m: &BinaryMask, score: f64| Detection {
            image_id: 1,
            category_id: 1,
            bbox: BBox::new(0.0, 0.0, 8.0, 8.0),
            mask: rle_encode(m),
            score,
            mask_iou_pred: None,
        };
        let dets = vec![mk(&ma, 0.9), mk(&mb, 0.8)];
        let boxed = soft_nms(&dets, &SoftNmsParams::default());
        assert!(boxed[1].score < 0.8);
        let masked = soft_nms(
            &dets,
            &SoftNmsParams { mask_iou_suppression: true, ..Default::default() },
        );
        assert_eq!(masked[1].score, 0.8);
    }

    #[test]
    fn soft_nms_scores_never_increase() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let dets: Vec<Detection> = (0..12)
                .map(|_| {
                    det(
                        BBox::new(rng.gen_range(0.0..20.0), rng.gen_range(0.0..20.0), 6.0, 6.0),
                        rng.gen_range(0.05..1.0),
                        32,
                        32,
                    )
                })
                .collect();
            let out = soft_nms(&dets, &SoftNmsParams::default());
            for pair in out.windows(2) {
                assert!(pair[0].score >= pair[1].score, "emission order broken");
            }
            // Every output score is bounded by the matching input's score.
            for o in &out {
                let source = dets
                    .iter()
                    .find(|d| d.bbox == o.bbox && d.mask == o.mask)
                    .expect("output detections come from the input");
                assert!(o.score <= source.score + 1e-15);
            }
        }
    }

    #[test]
    fn inverse_map_known_boxes() {
        let extent = (100u32, 100u32);
        let m = {
            let mut m = BinaryMask::new(100, 100);
            m.fill_rect(Rect { x: 10, y: 20, width: 30, height: 40 });
            m
        };
        let base = Detection {
            image_id: 1,
            category_id: 1,
            bbox: BBox::new(10.0, 20.0, 30.0, 40.0),
            mask: rle_encode(&m),
            score: 0.9,
            mask_iou_pred: None,
        };

        // Identity transform is a pass-through.
        let id = TtaTransform::identity(extent);
        assert_eq!(inverse_map(&[base.clone()], &id).unwrap()[0], base);

        // Pure downscale: view-frame box (20,40,60,80) over a 2× view maps
        // back to (10,20,30,40).
        let t = TtaTransform { scale: 2.0, hflipped: false, original_extent: extent };
        let view_mask = rle_decode(&base.mask).unwrap().resize(200, 200).unwrap();
        let view_det = Detection {
            bbox: BBox::new(20.0, 40.0, 60.0, 80.0),
            mask: rle_encode(&view_mask),
            ..base.clone()
        };
        let back = inverse_map(&[view_det], &t).unwrap();
        assert_eq!(back[0].bbox, BBox::new(10.0, 20.0, 30.0, 40.0));

        // Pure flip: x → 100 − 10 − 30.
        let tf = TtaTransform { scale: 1.0, hflipped: true, original_extent: extent };
        let flip_det = Detection { mask: rle_encode(&rle_decode(&base.mask).unwrap().hflip()), ..base.clone() };
        let back = inverse_map(&[flip_det], &tf).unwrap();
        assert_eq!(back[0].bbox, BBox::new(60.0, 20.0, 30.0, 40.0));

        // Wrong mask extent → ShapeError.
        let bad = TtaTransform { scale: 3.0, hflipped: false, original_extent: extent };
        assert!(matches!(
            inverse_map(&[base.clone()], &bad),
            Err(PostprocessError::ShapeError { .. })
        ));
    }

    #[test]
    fn forward_then_inverse_is_identity_at_integer_scales() {
        let extent = (40u32, 60u32);
        let mut m = BinaryMask::new(40, 60);
        m.fill_rect(Rect { x: 11, y: 7, width: 17, height: 23 });
        let d = Detection {
            image_id: 3,
            category_id: 1,
            bbox: BBox::new(11.0, 7.0, 17.0, 23.0),
            mask: rle_encode(&m),
            score: 0.83,
            mask_iou_pred: Some(0.9),
        };
        for t in [
            TtaTransform { scale: 2.0, hflipped: false, original_extent: extent },
            TtaTransform { scale: 3.0, hflipped: true, original_extent: extent },
            TtaTransform { scale: 1.0, hflipped: true, original_extent: extent },
        ] {
            let there = forward_map(&[d.clone()], &t).unwrap();
            let back = inverse_map(&there, &t).unwrap();
            assert!((back[0].bbox.x - d.bbox.x).abs() < 1e-9, "{t:?}");
            assert!((back[0].bbox.y - d.bbox.y).abs() < 1e-9);
            assert!((back[0].bbox.w - d.bbox.w).abs() < 1e-9);
            assert!((back[0].bbox.h - d.bbox.h).abs() < 1e-9);
            assert_eq!(back[0].mask, d.mask, "mask round trip at {t:?}");
            assert_eq!(back[0].score, d.score);
        }
    }

    #[test]
    fn tta_merge_identity_group_equals_soft_nms() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = SoftNmsParams::default();
        for _ in 0..20 {
            let dets: Vec<Detection> = (0..8)
                .map(|_| {
                    det(
                        BBox::new(rng.gen_range(0.0..24.0), rng.gen_range(0.0..24.0), 6.0, 6.0),
                        rng.gen_range(0.05..1.0),
                        32,
                        32,
                    )
                })
                .collect();
            let t = TtaTransform::identity((32, 32));
            let merged = tta_merge(&[(dets.clone(), t)], &p).unwrap();
            assert_eq!(merged, soft_nms(&dets, &p));
        }
    }

    #[test]
    fn tta_merge_flip_duplicates_collapse_to_originals() {
        let extent = (64u32, 64u32);
        let dets: Vec<Detection> = (0..4)
            .map(|i| det(BBox::new(2.0 + 14.0 * i as f64, 8.0, 10.0, 12.0), 0.9 - 0.1 * i as f64, 64, 64))
            .collect();
        let id = TtaTransform::identity(extent);
        let flip = TtaTransform { scale: 1.0, hflipped: true, original_extent: extent };
        let flipped_view = forward_map(&dets, &flip).unwrap();
        // Hard-NMS limit so exact duplicates are pruned rather than decayed.
        let p = SoftNmsParams { sigma: 1e-6, score_floor: 0.01, ..Default::default() };
        let merged = tta_merge(&[(dets.clone(), id), (flipped_view, flip)], &p).unwrap();
        assert_eq!(merged.len(), dets.len());
        for (m, d) in merged.iter().zip(&dets) {
            assert_eq!(m.score, d.score, "top scores must be the undecayed originals");
        }
        // Empty input stays empty.
        assert!(tta_merge(&[], &p).unwrap().is_empty());
    }
}
