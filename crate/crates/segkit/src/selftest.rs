//! Fast, self-contained invariant checks behind `segkit selftest`.
//!
//! Each check re-derives an expected value from first principles (pixel
//! counting, replayed draws, analytic formulas) rather than trusting the
//! code under test. Everything runs in memory; nothing touches the
//! filesystem.

use crate::augment::{self, AugmentConfig, Instance, Sample};
use crate::coco::{Annotation, Category, Dataset, Detection, ImageInfo};
use crate::eval::{evaluate, EvalParams};
use crate::harness::{oracle_infer, synthetic_dataset, OracleParams};
use crate::imaging::{self, ImageBuffer, Photometric};
use crate::mask::{
    box_iou, mask_iou, rle_decode, rle_encode, BBox, BinaryMask, Rect, RleMask,
};
use crate::postprocess::{
    forward_map, inverse_map, soft_nms, NmsMethod, SoftNmsParams, TtaTransform,
};
use crate::rng::RandomStream;
use crate::swa::{archive_bytes, average_checkpoints, Checkpoint, Tensor};

pub struct CheckResult {
    pub name: &'static str,
    pub outcome: Result<(), String>,
}

/// Runs every check and reports one result per invariant, in a fixed order.
pub fn run_all() -> Vec<CheckResult> {
    let checks: Vec<(&'static str, fn() -> Result<(), String>)> = vec![
        ("rle-roundtrip-exhaustive-3x3", rle_roundtrip_exhaustive),
        ("rle-roundtrip-random-32x32", rle_roundtrip_random),
        ("rle-string-codec-goldens", rle_string_goldens),
        ("mask-iou-pixel-oracle", mask_iou_oracle),
        ("box-iou-analytic", box_iou_analytic),
        ("bilinear-same-size-identity", bilinear_identity),
        ("hsv-roundtrip-lattice", hsv_roundtrip),
        ("photometric-neutral-identity", photometric_neutral),
        ("softnms-analytic-decay", softnms_analytic),
        ("softnms-scores-never-increase", softnms_monotone),
        ("tta-forward-inverse-identity", tta_roundtrip),
        ("copy-paste-pixel-provenance", copy_paste_provenance),
        ("geometric-extent-contract", geometric_extent),
        ("swa-mean-and-permutation", swa_mean),
        ("swa-canonical-bytes", swa_bytes),
        ("eval-perfect-identity", eval_perfect),
        ("eval-threshold-convention", eval_threshold),
        ("oracle-noiseless-composition", oracle_composition),
    ];
    checks
        .into_iter()
        .map(|(name, f)| CheckResult { name, outcome: f() })
        .collect()
}

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn rle_roundtrip_exhaustive() -> Result<(), String> {
    for bits in 0..512u32 {
        let mask = BinaryMask::from_fn(3, 3, |y, x| bits >> (x * 3 + y) & 1 == 1);
        let rle = rle_encode(&mask);
        let back = rle_decode(&rle).map_err(|e| format!("mask {bits}: {e}"))?;
        ensure(back == mask, format!("mask {bits} changed under round trip"))?;
        for (i, &run) in rle.counts.iter().enumerate() {
            ensure(
                i == 0 || run > 0,
                format!("mask {bits}: interior zero run at {i}"),
            )?;
        }
    }
    Ok(())
}

fn rle_roundtrip_random() -> Result<(), String> {
    let mut rng = RandomStream::new(0x5e1f);
    for case in 0..500 {
        let mask = BinaryMask::from_fn(32, 32, |_, _| rng.bernoulli(0.5));
        let back = rle_decode(&rle_encode(&mask)).map_err(|e| format!("case {case}: {e}"))?;
        ensure(back == mask, format!("case {case} changed under round trip"))?;
    }
    Ok(())
}

fn rle_string_goldens() -> Result<(), String> {
    use crate::coco::{rle_from_string, rle_to_string};
    let cases: &[(&[u32], u32, u32, &str)] = &[
        (&[9], 3, 3, "9"),
        (&[5, 3, 2, 4, 1], 5, 3, "5321O"),
        (&[345], 15, 23, "i:"),
    ];
    for &(counts, h, w, want) in cases {
        let rle = RleMask {
            height: h,
            width: w,
            counts: counts.to_vec(),
        };
        let got = rle_to_string(&rle);
        ensure(got == want, format!("{counts:?} encoded to {got}, want {want}"))?;
        let back = rle_from_string(want, h, w).map_err(|e| e.to_string())?;
        ensure(back == rle, format!("{want} decoded to {:?}", back.counts))?;
    }
    Ok(())
}

fn mask_iou_oracle() -> Result<(), String> {
    let mut rng = RandomStream::new(0x10f);
    for case in 0..100 {
        let a = BinaryMask::from_fn(24, 24, |_, _| rng.bernoulli(0.3));
        let b = BinaryMask::from_fn(24, 24, |_, _| rng.bernoulli(0.3));
        let (mut inter, mut union) = (0u64, 0u64);
        for y in 0..24 {
            for x in 0..24 {
                let (va, vb) = (a.get(y, x), b.get(y, x));
                inter += (va && vb) as u64;
                union += (va || vb) as u64;
            }
        }
        let want = if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        };
        let got = mask_iou(&a, &b).map_err(|e| e.to_string())?;
        ensure(got == want, format!("case {case}: {got} != {want}"))?;
    }
    Ok(())
}

fn box_iou_analytic() -> Result<(), String> {
    // Two unit-offset 2×2 boxes: intersection 1, union 7.
    let a = BBox::new(0.0, 0.0, 2.0, 2.0);
    let b = BBox::new(1.0, 1.0, 2.0, 2.0);
    ensure(
        (box_iou(&a, &b) - 1.0 / 7.0).abs() < 1e-15,
        format!("1/7 case gave {}", box_iou(&a, &b)),
    )?;
    ensure(box_iou(&a, &b) == box_iou(&b, &a), "asymmetric IoU")
}

fn bilinear_identity() -> Result<(), String> {
    let mut rng = RandomStream::new(0xb1);
    let img = ImageBuffer::from_fn(17, 23, |_, _| {
        [
            rng.uniform_u32(0, 255) as u8,
            rng.uniform_u32(0, 255) as u8,
            rng.uniform_u32(0, 255) as u8,
        ]
    });
    let resized = img.resize(17, 23).map_err(|e| e.to_string())?;
    ensure(resized.as_bytes() == img.as_bytes(), "same-size resize not identity")
}

fn hsv_roundtrip() -> Result<(), String> {
    for r in (0..=255u32).step_by(17) {
        for g in (0..=255u32).step_by(17) {
            for b in (0..=255u32).step_by(17) {
                let px = [r as u8, g as u8, b as u8];
                let (h, s, v) = imaging::rgb_to_hsv(px);
                let back = imaging::hsv_to_rgb(h, s, v);
                ensure(back == px, format!("{px:?} -> {back:?}"))?;
            }
        }
    }
    Ok(())
}

fn photometric_neutral() -> Result<(), String> {
    let mut rng = RandomStream::new(0x9e);
    let img = ImageBuffer::from_fn(16, 16, |_, _| {
        [
            rng.uniform_u32(0, 255) as u8,
            rng.uniform_u32(0, 255) as u8,
            rng.uniform_u32(0, 255) as u8,
        ]
    });
    for op in [
        Photometric::Brightness(0.0),
        Photometric::Contrast(1.0),
        Photometric::Saturation(1.0),
        Photometric::Hue(0.0),
    ] {
        let out = imaging::photometric_adjust(&img, op);
        ensure(out.as_bytes() == img.as_bytes(), format!("{op:?} not identity"))?;
    }
    Ok(())
}

fn unit_det(x: f64, y: f64, side: u32, score: f64, extent: u32) -> Detection {
    let mut mask = BinaryMask::new(extent, extent);
    mask.fill_rect(Rect {
        x: x as u32,
        y: y as u32,
        width: side,
        height: side,
    });
    Detection {
        image_id: 1,
        category_id: 1,
        bbox: BBox::new(x, y, side as f64, side as f64),
        mask: rle_encode(&mask),
        score,
        mask_iou_pred: None,
    }
}

fn softnms_analytic() -> Result<(), String> {
    // Coincident pair, gaussian sigma 0.5: the runner-up decays by e^(−1/0.5).
    let dets = vec![unit_det(2.0, 2.0, 4, 1.0, 16), unit_det(2.0, 2.0, 4, 0.8, 16)];
    let out = soft_nms(&dets, &SoftNmsParams::default());
    let want = 0.8 * (-2.0f64).exp();
    ensure(out.len() == 2, format!("kept {} of 2", out.len()))?;
    ensure(
        (out[1].score - want).abs() <= 1e-9,
        format!("decayed score {} want {want}", out[1].score),
    )?;
    // Disjoint detections pass through untouched.
    let apart = vec![unit_det(0.0, 0.0, 3, 0.9, 16), unit_det(10.0, 10.0, 3, 0.7, 16)];
    let kept = soft_nms(&apart, &SoftNmsParams::default());
    ensure(kept == apart, "disjoint pair was altered")
}

fn softnms_monotone() -> Result<(), String> {
    let mut rng = RandomStream::new(0x50f);
    for case in 0..20 {
        let dets: Vec<Detection> = (0..8)
            .map(|_| {
                unit_det(
                    rng.uniform_u32(0, 10) as f64,
                    rng.uniform_u32(0, 10) as f64,
                    rng.uniform_u32(2, 5),
                    rng.uniform_f64(0.1, 1.0),
                    16,
                )
            })
            .collect();
        for method in [NmsMethod::Gaussian, NmsMethod::Linear] {
            let p = SoftNmsParams {
                method,
                score_floor: 0.0,
                ..SoftNmsParams::default()
            };
            for d in soft_nms(&dets, &p) {
                let original = dets
                    .iter()
                    .find(|o| o.bbox == d.bbox && o.score >= d.score)
                    .is_some();
                ensure(original, format!("case {case}: score increased"))?;
            }
        }
    }
    Ok(())
}

fn tta_roundtrip() -> Result<(), String> {
    let mut rng = RandomStream::new(0x77a);
    for case in 0..10 {
        let mask = BinaryMask::from_fn(20, 28, |_, _| rng.bernoulli(0.4));
        let det = Detection {
            image_id: 1,
            category_id: 1,
            bbox: mask.tight_bbox().unwrap_or(BBox::new(0.0, 0.0, 0.0, 0.0)),
            mask: rle_encode(&mask),
            score: 0.9,
            mask_iou_pred: None,
        };
        for (scale, hflipped) in [(1.0, true), (2.0, false), (3.0, true)] {
            let t = TtaTransform {
                scale,
                hflipped,
                original_extent: (20, 28),
            };
            let there = forward_map(&[det.clone()], &t).map_err(|e| e.to_string())?;
            let back = inverse_map(&there, &t).map_err(|e| e.to_string())?;
            ensure(
                back[0].mask == det.mask,
                format!("case {case} s{scale} flip={hflipped}: mask changed"),
            )?;
            for (got, want) in [
                (back[0].bbox.x, det.bbox.x),
                (back[0].bbox.y, det.bbox.y),
                (back[0].bbox.w, det.bbox.w),
                (back[0].bbox.h, det.bbox.h),
            ] {
                ensure(
                    (got - want).abs() <= 1e-9,
                    format!("case {case} s{scale}: box {got} vs {want}"),
                )?;
            }
        }
    }
    Ok(())
}

fn copy_paste_provenance() -> Result<(), String> {
    let mut rng = RandomStream::new(0xc0de);
    let (h, w) = (20u32, 20u32);
    let paint = |seed: u64| {
        let mut r = RandomStream::new(seed);
        ImageBuffer::from_fn(h, w, |_, _| {
            [
                r.uniform_u32(0, 255) as u8,
                r.uniform_u32(0, 255) as u8,
                r.uniform_u32(0, 255) as u8,
            ]
        })
    };
    let instance = |id: u64, r: &mut RandomStream| {
        let mut mask = BinaryMask::new(h, w);
        mask.fill_rect(Rect {
            x: r.uniform_u32(0, 14),
            y: r.uniform_u32(0, 14),
            width: r.uniform_u32(3, 6),
            height: r.uniform_u32(3, 6),
        });
        Instance {
            id,
            category_id: 1,
            mask,
            iscrowd: false,
        }
    };
    let target = Sample {
        image: paint(1),
        annotations: vec![instance(1, &mut rng), instance(2, &mut rng)],
    };
    let source = Sample {
        image: paint(2),
        annotations: vec![instance(10, &mut rng), instance(11, &mut rng)],
    };
    let out = augment::copy_paste(
        &target,
        &source,
        &AugmentConfig::default(),
        &mut RandomStream::new(5),
    )
    .map_err(|e| e.to_string())?;
    for y in 0..h {
        for x in 0..w {
            let px = out.image.get(y, x);
            ensure(
                px == target.image.get(y, x) || px == source.image.get(y, x),
                format!("third-value pixel at ({y},{x})"),
            )?;
        }
    }
    Ok(())
}

fn geometric_extent() -> Result<(), String> {
    let cfg = AugmentConfig::default();
    for seed in 0..5 {
        let mut gen = RandomStream::new(seed + 300);
        let (h, w) = (gen.uniform_u32(50, 300), gen.uniform_u32(50, 300));
        let sample = Sample {
            image: ImageBuffer::new(h, w),
            annotations: vec![],
        };
        let out = augment::geometric_pipeline(&sample, &cfg, &mut RandomStream::new(seed));
        ensure(
            (out.image.height(), out.image.width()) == (1440, 1920),
            format!("{h}x{w} input produced {}x{}", out.image.height(), out.image.width()),
        )?;
    }
    Ok(())
}

fn swa_mean() -> Result<(), String> {
    let ck = |vals: [f32; 2]| {
        let mut c = Checkpoint::new();
        c.insert("w", Tensor::new(vec![2], vals.to_vec()));
        c
    };
    let same = average_checkpoints(&[ck([1.5, -2.25])]).map_err(|e| e.to_string())?;
    ensure(same.get("w").unwrap().data == [1.5, -2.25], "K=1 mean not identity")?;
    let avg = average_checkpoints(&[ck([1.0, 2.0]), ck([3.0, 4.0])]).map_err(|e| e.to_string())?;
    ensure(avg.get("w").unwrap().data == [2.0, 3.0], "two-point mean wrong")?;
    let perm = average_checkpoints(&[ck([3.0, 4.0]), ck([1.0, 2.0])]).map_err(|e| e.to_string())?;
    ensure(
        archive_bytes(&avg) == archive_bytes(&perm),
        "mean not permutation-invariant",
    )
}

fn swa_bytes() -> Result<(), String> {
    let mut ck = Checkpoint::new();
    ck.insert("b", Tensor::new(vec![1], vec![0.5]));
    ck.insert("a", Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
    let bytes = archive_bytes(&ck);
    ensure(&bytes[..4] == b"SWA1", "missing magic")?;
    ensure(bytes == archive_bytes(&ck.clone()), "encoding not canonical")?;
    let empty = archive_bytes(&Checkpoint::new());
    ensure(empty == b"SWA1\0\0\0\0", format!("empty archive was {empty:?}"))
}

fn eval_perfect() -> Result<(), String> {
    let ds = synthetic_dataset(5, 128, 128, 4, 2, 0x917);
    let dets: Vec<Detection> = ds
        .annotations
        .iter()
        .map(|a| Detection {
            image_id: a.image_id,
            category_id: a.category_id,
            bbox: a.bbox,
            mask: a.mask.clone(),
            score: 1.0,
            mask_iou_pred: None,
        })
        .collect();
    let report = evaluate(&dets, &ds, &EvalParams::default()).map_err(|e| e.to_string())?;
    ensure(report.map == 1.0, format!("verbatim ground truth scored {}", report.map))
}

fn eval_threshold() -> Result<(), String> {
    // Single pair at IoU exactly 45/75 = 0.60: AP 1 at thresholds up to 0.60
    // inclusive, 0 above, so map = 3/10.
    let gt_mask = BinaryMask::from_fn(1, 100, |_, x| x < 60);
    let det_mask = BinaryMask::from_fn(1, 100, |_, x| (15..75).contains(&x));
    let ds = Dataset {
        images: vec![ImageInfo {
            id: 1,
            file_name: "one.png".into(),
            height: 1,
            width: 100,
        }],
        annotations: vec![Annotation::from_mask(1, 1, 1, &gt_mask, false)],
        categories: vec![Category {
            id: 1,
            name: "thing".into(),
        }],
    };
    let det = Detection {
        image_id: 1,
        category_id: 1,
        bbox: det_mask.tight_bbox().unwrap(),
        mask: rle_encode(&det_mask),
        score: 1.0,
        mask_iou_pred: None,
    };
    let report = evaluate(&[det], &ds, &EvalParams::default()).map_err(|e| e.to_string())?;
    ensure(
        (report.map - 0.3).abs() < 1e-12,
        format!("IoU-0.60 pair scored map {}", report.map),
    )?;
    ensure(
        report.ap_per_threshold["0.60"] == 1.0 && report.ap_per_threshold["0.65"] == 0.0,
        "threshold convention is not IoU >= thr",
    )
}

fn oracle_composition() -> Result<(), String> {
    let ds = synthetic_dataset(3, 128, 128, 3, 2, 0xabc);
    let mut dets = Vec::new();
    for info in &ds.images {
        dets.extend(
            oracle_infer(info.id, &ds, &OracleParams::default()).map_err(|e| e.to_string())?,
        );
    }
    let report = evaluate(&dets, &ds, &EvalParams::default()).map_err(|e| e.to_string())?;
    ensure(report.map == 1.0, format!("noiseless oracle scored {}", report.map))
}
