//! Detector boundary and end-to-end runner: builds TTA views, collects
//! per-view detections (from the synthetic oracle or from pre-computed
//! results files), calibrates and fuses them, and scores the result.
//!
//! Real models stay outside the process: they run on the transformed views
//! and dump ordinary results JSON per view, which slots in through
//! [`DetectorConfig::ResultsFiles`]. The [`OracleDetector`] is the in-process
//! stand-in — it fabricates detections from ground truth with controllable
//! noise, which is what the invariant checks and the self-test drive.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coco::{self, CocoError, Dataset, Detection};
use crate::eval::{evaluate, EvalError, EvalParams, EvalReport};
use crate::mask::{mask_iou, rle_decode, rle_encode, BBox, BinaryMask, Rect};
use crate::postprocess::{
    calibrate_scores, forward_map, tta_merge, PostprocessError, SoftNmsParams, TtaTransform,
};
use crate::rng::RandomStream;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("unknown image id {0}")]
    UnknownId(u64),
    #[error("invalid pipeline config at {at}: {message}")]
    Config { at: String, message: String },
    #[error("view {view}: {message}")]
    View { view: String, message: String },
    #[error(transparent)]
    Dataset(#[from] CocoError),
    #[error(transparent)]
    Postprocess(#[from] PostprocessError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// One inference request: an image under one TTA transform. Detectors answer
/// in view-frame coordinates (masks sized to the transform's view extent);
/// adapters that need pixels can render the view from the dataset image via
/// the transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TtaView {
    pub image_id: u64,
    pub transform: TtaTransform,
}

/// The single capability a detector must offer. Implementations are pure
/// with respect to their own configuration and hold no mutable state, so
/// views may be dispatched concurrently in any order.
pub trait Detector: Sync {
    fn infer(&self, view: &TtaView) -> Result<Vec<Detection>, HarnessError>;
}

/// Noise model for the synthetic oracle. The default is the noiseless
/// oracle: it returns ground truth verbatim with score 1.0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleParams {
    pub seed: u64,
    /// Scores drawn uniformly from `mean ± spread`, clamped to [0, 1].
    pub score_distribution: (f64, f64),
    /// Mask jitter radius bound: each emitted mask is dilated or eroded by
    /// `round(u * jitter_px)` pixels (Chebyshev metric), `u` uniform in [0,1).
    pub jitter_px: f64,
    /// Expected false-positive rectangles per image (Poisson mean).
    pub fp_rate: f64,
    /// Probability of dropping each ground-truth instance.
    pub fn_rate: f64,
    /// `mask_iou_pred` is the true mask IoU plus uniform noise from
    /// `± maskiou_noise`, clamped to [0, 1].
    pub maskiou_noise: f64,
}

impl Default for OracleParams {
    fn default() -> Self {
        OracleParams {
            seed: 0,
            score_distribution: (1.0, 0.0),
            jitter_px: 0.0,
            fp_rate: 0.0,
            fn_rate: 0.0,
            maskiou_noise: 0.0,
        }
    }
}

impl OracleParams {
    fn validate(&self) -> Result<(), String> {
        let (mean, spread) = self.score_distribution;
        if !(0.0..=1.0).contains(&mean) || !spread.is_finite() || spread < 0.0 {
            return Err(format!("score_distribution ({mean}, {spread}) invalid"));
        }
        if !(0.0..=1.0).contains(&self.fn_rate) {
            return Err(format!("fn_rate {} outside [0, 1]", self.fn_rate));
        }
        for (name, v) in [
            ("jitter_px", self.jitter_px),
            ("fp_rate", self.fp_rate),
            ("maskiou_noise", self.maskiou_noise),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(format!("{name} {v} must be finite and nonnegative"));
            }
        }
        Ok(())
    }
}

/// Chebyshev (L∞) dilation by `r`: a pixel is set when any input pixel lies
/// within the `(2r+1)²` window around it, clipped at the image border.
pub(crate) fn dilate(mask: &BinaryMask, r: u32) -> BinaryMask {
    if r == 0 {
        return mask.clone();
    }
    let (h, w) = (mask.height(), mask.width());
    let r = r as usize;
    // Separable: horizontal window-any via row prefix sums, then vertical.
    let pass = |m: &BinaryMask, transpose: bool| {
        let (rows, cols) = if transpose { (w, h) } else { (h, w) };
        let at = |y: u32, x: u32| if transpose { m.get(x, y) } else { m.get(y, x) };
        let mut prefix = vec![0u32; (cols + 1) as usize];
        let mut out = BinaryMask::new(h, w);
        for y in 0..rows {
            for x in 0..cols {
                prefix[x as usize + 1] = prefix[x as usize] + at(y, x) as u32;
            }
            for x in 0..cols {
                let lo = (x as usize).saturating_sub(r);
                let hi = (x as usize + r + 1).min(cols as usize);
                if prefix[hi] > prefix[lo] {
                    if transpose {
                        out.set(x, y, true);
                    } else {
                        out.set(y, x, true);
                    }
                }
            }
        }
        out
    };
    let horizontal = pass(mask, false);
    pass(&horizontal, true)
}

/// Chebyshev erosion by `r`: complement, dilate, complement. Pixels whose
/// clipped window is entirely foreground survive.
pub(crate) fn erode(mask: &BinaryMask, r: u32) -> BinaryMask {
    if r == 0 {
        return mask.clone();
    }
    let (h, w) = (mask.height(), mask.width());
    let inverted = BinaryMask::from_fn(h, w, |y, x| !mask.get(y, x));
    let grown = dilate(&inverted, r);
    BinaryMask::from_fn(h, w, |y, x| !grown.get(y, x))
}

/// Fabricates detections for one image from its ground truth.
///
/// Each non-crowd instance is emitted with probability `1 − fn_rate`, its
/// mask dilated or eroded (fair coin) by the drawn jitter radius, score drawn
/// from the score distribution, and `mask_iou_pred` set to the jittered
/// mask's true IoU against the original plus noise. `Poisson(fp_rate)`
/// false-positive rectangles follow with scores in [0, 0.05).
///
/// Determinism: every instance draws from its own child stream
/// `root(seed).child(image_id).child(annotation_id)` in the order drop,
/// jitter radius, dilate-vs-erode, score, IoU noise; false positives use the
/// `child(u64::MAX)` stream. Output order is annotation order, then false
/// positives.
pub fn oracle_infer(
    image_id: u64,
    gt: &Dataset,
    p: &OracleParams,
) -> Result<Vec<Detection>, HarnessError> {
    let info = gt
        .image(image_id)
        .ok_or(HarnessError::UnknownId(image_id))?;
    let (h, w) = (info.height, info.width);
    let root = RandomStream::new(p.seed).child(image_id);
    let clamp01 = |v: f64| v.clamp(0.0, 1.0);
    let (mean, spread) = p.score_distribution;

    let mut dets = Vec::new();
    for ann in gt.annotations_for(image_id) {
        if ann.iscrowd {
            continue;
        }
        let mut r = root.child(ann.id);
        if r.bernoulli(p.fn_rate) {
            continue;
        }
        let radius = (r.uniform_f64(0.0, 1.0) * p.jitter_px).round() as u32;
        let grow = r.bernoulli(0.5);
        let original = rle_decode(&ann.mask).map_err(CocoError::from)?;
        let jittered = if grow {
            dilate(&original, radius)
        } else {
            erode(&original, radius)
        };
        let score = clamp01(r.uniform_f64(mean - spread, mean + spread));
        let true_iou = mask_iou(&jittered, &original).expect("same extent by construction");
        let pred = clamp01(true_iou + r.uniform_f64(-p.maskiou_noise, p.maskiou_noise));
        dets.push(Detection {
            image_id,
            category_id: ann.category_id,
            bbox: jittered
                .tight_bbox()
                .unwrap_or(BBox::new(0.0, 0.0, 0.0, 0.0)),
            mask: rle_encode(&jittered),
            score,
            mask_iou_pred: Some(pred),
        });
    }

    let mut fr = root.child(u64::MAX);
    for _ in 0..fr.poisson(p.fp_rate) {
        let x = fr.uniform_u32(0, w - 1);
        let y = fr.uniform_u32(0, h - 1);
        let bw = fr.uniform_u32(1, (w / 4).max(1)).min(w - x);
        let bh = fr.uniform_u32(1, (h / 4).max(1)).min(h - y);
        let mut mask = BinaryMask::new(h, w);
        mask.fill_rect(Rect {
            x,
            y,
            width: bw,
            height: bh,
        });
        let score = fr.uniform_f64(0.0, 0.05);
        let cat = fr.uniform_u32(0, gt.categories.len() as u32 - 1) as usize;
        let pred = clamp01(fr.uniform_f64(-p.maskiou_noise, p.maskiou_noise));
        dets.push(Detection {
            image_id,
            category_id: gt.categories[cat].id,
            bbox: mask.tight_bbox().expect("rectangle is nonempty"),
            mask: rle_encode(&mask),
            score,
            mask_iou_pred: Some(pred),
        });
    }
    Ok(dets)
}

/// [`Detector`] over the synthetic oracle: original-frame fabrications pushed
/// through [`forward_map`] into the requested view, exactly as a real model
/// would observe them.
pub struct OracleDetector<'a> {
    pub dataset: &'a Dataset,
    pub params: OracleParams,
}

impl Detector for OracleDetector<'_> {
    fn infer(&self, view: &TtaView) -> Result<Vec<Detection>, HarnessError> {
        let dets = oracle_infer(view.image_id, self.dataset, &self.params)?;
        Ok(forward_map(&dets, &view.transform)?)
    }
}

/// One entry of the TTA sweep as configured: a scale and an optional mirror.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TtaViewSpec {
    pub scale: f64,
    #[serde(default)]
    pub hflip: bool,
}

impl TtaViewSpec {
    pub fn transform(&self, original_extent: (u32, u32)) -> TtaTransform {
        TtaTransform {
            scale: self.scale,
            hflipped: self.hflip,
            original_extent,
        }
    }

    /// The view's stable name (`s<scale>` plus `_flip`), the key used in
    /// `results_files`.
    pub fn name(&self) -> String {
        self.transform((1, 1)).view_name()
    }
}

fn default_tta() -> Vec<TtaViewSpec> {
    vec![TtaViewSpec {
        scale: 1.0,
        hflip: false,
    }]
}

/// Where detections come from: the in-process oracle, or one pre-computed
/// results JSON per view (view-frame coordinates, keyed by view name).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DetectorConfig {
    Oracle(OracleParams),
    ResultsFiles(BTreeMap<String, PathBuf>),
}

/// Full pipeline description, loaded from JSON. Only `dataset` and
/// `detector` are required.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// COCO ground-truth JSON path.
    pub dataset: PathBuf,
    pub detector: DetectorConfig,
    /// Views to fuse; defaults to the identity view only.
    #[serde(default = "default_tta")]
    pub tta: Vec<TtaViewSpec>,
    #[serde(default)]
    pub postprocess: SoftNmsParams,
    #[serde(default)]
    pub eval: EvalParams,
    /// Run seed, folded into the oracle's own seed.
    #[serde(default)]
    pub seed: u64,
    /// When set, the merged detections are written here as results JSON.
    #[serde(default)]
    pub results_out: Option<PathBuf>,
}

impl PipelineConfig {
    /// Parses and validates a config document; errors carry the JSON path to
    /// the offending value.
    pub fn from_json(text: &str) -> Result<PipelineConfig, HarnessError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: PipelineConfig =
            serde_path_to_error::deserialize(de).map_err(|e| HarnessError::Config {
                at: e.path().to_string(),
                message: e.inner().to_string(),
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), HarnessError> {
        let fail = |at: &str, message: String| {
            Err(HarnessError::Config {
                at: at.to_string(),
                message,
            })
        };
        if self.tta.is_empty() {
            return fail("tta", "at least one view is required".into());
        }
        let mut names = HashSet::new();
        for (i, spec) in self.tta.iter().enumerate() {
            if !spec.scale.is_finite() || spec.scale <= 0.0 {
                return fail(&format!("tta[{i}].scale"), format!("invalid scale {}", spec.scale));
            }
            if !names.insert(spec.name()) {
                return fail(&format!("tta[{i}]"), format!("duplicate view {}", spec.name()));
            }
        }
        match &self.detector {
            DetectorConfig::Oracle(p) => {
                if let Err(message) = p.validate() {
                    return fail("detector.oracle", message);
                }
            }
            DetectorConfig::ResultsFiles(files) => {
                for spec in &self.tta {
                    if !files.contains_key(&spec.name()) {
                        return fail(
                            "detector.results_files",
                            format!("missing results file for view {}", spec.name()),
                        );
                    }
                }
                for key in files.keys() {
                    if !names.contains(key) {
                        return fail(
                            "detector.results_files",
                            format!("file given for unknown view {key}"),
                        );
                    }
                }
            }
        }
        Ok(())
    }
}

/// What a pipeline run produces: the merged original-frame detections and
/// their evaluation against the dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub report: EvalReport,
    pub detections: Vec<Detection>,
}

/// Calibrates one view's detections and consumes the calibration signal:
/// scores are multiplied by `mask_iou_pred` where present, after which the
/// field is cleared so downstream records stay plain.
fn calibrate_and_strip(dets: &[Detection]) -> Vec<Detection> {
    calibrate_scores(dets)
        .into_iter()
        .map(|mut d| {
            d.mask_iou_pred = None;
            d
        })
        .collect()
}

/// Runs detection → calibration → TTA fusion → evaluation over a whole
/// dataset, writing the merged results JSON when the config names a path.
///
/// Images are processed in parallel; per-image work is pure, and the merged
/// list is assembled in dataset image order, so the output depends only on
/// the config (including its seed).
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutput, HarnessError> {
    cfg.validate()?;
    let dataset = coco::load_coco(&cfg.dataset)?;
    let detections = match &cfg.detector {
        DetectorConfig::Oracle(p) => {
            // Fold the run seed into the oracle's seed so either knob moves
            // the whole run.
            let params = OracleParams {
                seed: RandomStream::new(cfg.seed).child(p.seed).seed(),
                ..p.clone()
            };
            let detector = OracleDetector {
                dataset: &dataset,
                params,
            };
            run_detector(&detector, &dataset, cfg)?
        }
        DetectorConfig::ResultsFiles(files) => {
            let mut per_view: Vec<(TtaViewSpec, HashMap<u64, Vec<Detection>>)> = Vec::new();
            for spec in &cfg.tta {
                let path = &files[&spec.name()];
                let mut by_image: HashMap<u64, Vec<Detection>> = HashMap::new();
                for d in coco::load_results(path)? {
                    if dataset.image(d.image_id).is_none() {
                        return Err(HarnessError::UnknownId(d.image_id));
                    }
                    by_image.entry(d.image_id).or_default().push(d);
                }
                per_view.push((*spec, by_image));
            }
            dataset
                .images
                .par_iter()
                .map(|info| {
                    let groups: Vec<(Vec<Detection>, TtaTransform)> = per_view
                        .iter()
                        .map(|(spec, by_image)| {
                            let dets = by_image.get(&info.id).map(Vec::as_slice).unwrap_or(&[]);
                            (calibrate_and_strip(dets), spec.transform((info.height, info.width)))
                        })
                        .collect();
                    tta_merge(&groups, &cfg.postprocess).map_err(|e| {
                        annotate_view_error(e, info.id)
                    })
                })
                .collect::<Result<Vec<_>, _>>()?
                .into_iter()
                .flatten()
                .collect()
        }
    };
    if let Some(path) = &cfg.results_out {
        coco::write_results(&detections, path)?;
    }
    let report = evaluate(&detections, &dataset, &cfg.eval)?;
    Ok(PipelineOutput { report, detections })
}

/// Runs any [`Detector`] over every (image, view) pair of `cfg.tta` and
/// fuses per image. Exposed so external adapters get the same wiring as the
/// oracle.
pub fn run_detector(
    detector: &dyn Detector,
    dataset: &Dataset,
    cfg: &PipelineConfig,
) -> Result<Vec<Detection>, HarnessError> {
    let merged: Vec<Vec<Detection>> = dataset
        .images
        .par_iter()
        .map(|info| {
            let mut groups = Vec::new();
            for spec in &cfg.tta {
                let transform = spec.transform((info.height, info.width));
                let view = TtaView {
                    image_id: info.id,
                    transform,
                };
                let dets = detector.infer(&view)?;
                groups.push((calibrate_and_strip(&dets), transform));
            }
            tta_merge(&groups, &cfg.postprocess)
                .map_err(|e| annotate_view_error(e, info.id))
        })
        .collect::<Result<_, _>>()?;
    Ok(merged.into_iter().flatten().collect())
}

fn annotate_view_error(e: PostprocessError, image_id: u64) -> HarnessError {
    HarnessError::View {
        view: format!("image {image_id}"),
        message: e.to_string(),
    }
}

/// Deterministic synthetic ground truth: rectangles with sides of at least
/// 30 px, pairwise box IoU at most 0.1, at most `max_instances` per image.
/// Image ids are `1..=images`; annotation ids run sequentially across the
/// dataset. The images exist only as records (no pixel files), which is all
/// the oracle-driven pipeline needs.
pub fn synthetic_dataset(
    images: usize,
    height: u32,
    width: u32,
    max_instances: u32,
    categories: u32,
    seed: u64,
) -> Dataset {
    assert!(height >= 64 && width >= 64, "extent too small for 30 px instances");
    assert!(categories >= 1 && max_instances >= 1);
    let root = RandomStream::new(seed);
    let side_max = |axis: u32| (axis / 3).clamp(30, 96);
    let mut dataset = Dataset {
        images: Vec::new(),
        annotations: Vec::new(),
        categories: (1..=categories)
            .map(|id| crate::coco::Category {
                id,
                name: format!("class_{id}"),
            })
            .collect(),
    };
    let mut next_ann = 1u64;
    for id in 1..=images as u64 {
        dataset.images.push(crate::coco::ImageInfo {
            id,
            file_name: format!("synthetic_{id}.png"),
            height,
            width,
        });
        let mut r = root.child(id);
        let want = r.uniform_u32(1, max_instances);
        let mut boxes: Vec<BBox> = Vec::new();
        let mut placed = 0;
        let mut attempts = 0;
        while placed < want && attempts < 50 {
            attempts += 1;
            let bw = r.uniform_u32(30, side_max(width));
            let bh = r.uniform_u32(30, side_max(height));
            let x = r.uniform_u32(0, width - bw);
            let y = r.uniform_u32(0, height - bh);
            let candidate = BBox::new(x as f64, y as f64, bw as f64, bh as f64);
            if boxes
                .iter()
                .any(|b| crate::mask::box_iou(b, &candidate) > 0.1)
            {
                continue;
            }
            let cat = r.uniform_u32(1, categories);
            let mut mask = BinaryMask::new(height, width);
            mask.fill_rect(Rect {
                x,
                y,
                width: bw,
                height: bh,
            });
            dataset.annotations.push(crate::coco::Annotation::from_mask(
                next_ann, id, cat, &mask, false,
            ));
            next_ann += 1;
            boxes.push(candidate);
            placed += 1;
        }
    }
    dataset
}
