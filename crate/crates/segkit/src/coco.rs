//! COCO-format dataset I/O: annotation ingestion (polygons and RLE),
//! the compressed RLE string codec, and detection results serialization.
//!
//! Ingestion recomputes every annotation's bbox and area from its mask, so
//! those invariants are enforced rather than trusted from the file. Stored
//! polygons are rasterized with even-odd fill sampled at half-pixel centers;
//! stored RLE (string or raw counts) is decoded and re-encoded canonically.

use crate::mask::{rle_decode, rle_encode, BBox, BinaryMask, MaskError, RleMask};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CocoError {
    #[error("cannot access {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed JSON at {at}: {message}")]
    Parse { at: String, message: String },
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("bad mask: {0}")]
    Mask(String),
}

impl From<MaskError> for CocoError {
    fn from(e: MaskError) -> Self {
        CocoError::Mask(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageInfo {
    pub id: u64,
    pub file_name: String,
    pub height: u32,
    pub width: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Category {
    pub id: u32,
    pub name: String,
}

/// Ground-truth instance. `bbox` and `area` are always derived from `mask`.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u32,
    pub bbox: BBox,
    pub mask: RleMask,
    pub area: u64,
    pub iscrowd: bool,
}

impl Annotation {
    /// Builds an annotation from a dense mask, deriving bbox, area, and the
    /// canonical RLE.
    pub fn from_mask(
        id: u64,
        image_id: u64,
        category_id: u32,
        mask: &BinaryMask,
        iscrowd: bool,
    ) -> Annotation {
        Annotation {
            id,
            image_id,
            category_id,
            bbox: mask.tight_bbox().unwrap_or(BBox::new(0.0, 0.0, 0.0, 0.0)),
            mask: rle_encode(mask),
            area: mask.area(),
            iscrowd,
        }
    }
}

/// Model output for one instance. `mask_iou_pred` carries the mask-quality
/// head's estimate when the detector provides one.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub image_id: u64,
    pub category_id: u32,
    pub bbox: BBox,
    pub mask: RleMask,
    pub score: f64,
    pub mask_iou_pred: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<ImageInfo>,
    pub annotations: Vec<Annotation>,
    pub categories: Vec<Category>,
}

impl Dataset {
    pub fn image(&self, id: u64) -> Option<&ImageInfo> {
        self.images.iter().find(|im| im.id == id)
    }

    pub fn annotations_for(&self, image_id: u64) -> Vec<&Annotation> {
        self.annotations.iter().filter(|a| a.image_id == image_id).collect()
    }
}

// ---------------------------------------------------------------------------
// Compressed RLE string codec (COCO interchange convention)
// ---------------------------------------------------------------------------

/// Encodes run counts as the COCO compressed string: counts past the second
/// are delta-coded against the count two positions back, then each value is
/// emitted as little-endian 5-bit groups (bit 5 = continuation, bit 4 of the
/// final group = sign), offset into printable ASCII by 48.
pub fn rle_to_string(rle: &RleMask) -> String {
    let mut out = Vec::new();
    for i in 0..rle.counts.len() {
        let mut x = rle.counts[i] as i64;
        if i > 2 {
            x -= rle.counts[i - 2] as i64;
        }
        loop {
            let mut c = (x & 0x1f) as u8;
            x >>= 5;
            let more = if c & 0x10 != 0 { x != -1 } else { x != 0 };
            if more {
                c |= 0x20;
            }
            out.push(c + 48);
            if !more {
                break;
            }
        }
    }
    String::from_utf8(out).expect("codec emits ASCII 48..=111 only")
}

/// Inverse of [`rle_to_string`]. The extent is taken from the caller (COCO
/// stores it alongside the string); run sums are validated downstream by
/// [`rle_decode`].
pub fn rle_from_string(s: &str, height: u32, width: u32) -> Result<RleMask, CocoError> {
    let bytes = s.as_bytes();
    let mut counts: Vec<u32> = Vec::new();
    let mut p = 0;
    while p < bytes.len() {
        let mut x: i64 = 0;
        let mut k = 0u32;
        loop {
            if p >= bytes.len() {
                return Err(CocoError::Mask("truncated RLE string".into()));
            }
            if k >= 13 {
                return Err(CocoError::Mask("RLE run group too long".into()));
            }
            let b = bytes[p];
            if !(48..=111).contains(&b) {
                return Err(CocoError::Mask(format!("invalid RLE string byte {b} at offset {p}")));
            }
            let c = b - 48;
            x |= ((c & 0x1f) as i64) << (5 * k);
            p += 1;
            k += 1;
            if c & 0x20 == 0 {
                if c & 0x10 != 0 {
                    x |= -1i64 << (5 * k);
                }
                break;
            }
        }
        if counts.len() > 2 {
            x += counts[counts.len() - 2] as i64;
        }
        if x < 0 || x > u32::MAX as i64 {
            return Err(CocoError::Mask(format!("RLE run count {x} out of range")));
        }
        counts.push(x as u32);
    }
    Ok(RleMask { height, width, counts })
}

// ---------------------------------------------------------------------------
// Polygon rasterization
// ---------------------------------------------------------------------------

/// Rasterizes polygon rings (flat x,y coordinate lists) onto a mask: a pixel
/// is foreground when its center (x+0.5, y+0.5) lies inside any ring by the
/// even-odd rule. Multiple rings union, matching COCO's multi-part objects.
pub fn rasterize_polygons(
    rings: &[Vec<f64>],
    height: u32,
    width: u32,
) -> Result<BinaryMask, CocoError> {
    for (i, ring) in rings.iter().enumerate() {
        if ring.len() < 6 || ring.len() % 2 != 0 {
            return Err(CocoError::Mask(format!(
                "polygon ring {i} has {} coordinates; need an even count of at least 6",
                ring.len()
            )));
        }
        if ring.iter().any(|v| !v.is_finite()) {
            return Err(CocoError::Mask(format!("polygon ring {i} has a non-finite coordinate")));
        }
    }
    let mut mask = BinaryMask::new(height, width);
    for ring in rings {
        for y in 0..height {
            for x in 0..width {
                if !mask.get(y, x) && point_in_ring(x as f64 + 0.5, y as f64 + 0.5, ring) {
                    mask.set(y, x, true);
                }
            }
        }
    }
    Ok(mask)
}

/// Even-odd crossing test against one ring.
fn point_in_ring(px: f64, py: f64, ring: &[f64]) -> bool {
    let n = ring.len() / 2;
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = (ring[2 * i], ring[2 * i + 1]);
        let (xj, yj) = (ring[2 * j], ring[2 * j + 1]);
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

// ---------------------------------------------------------------------------
// Wire schema
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    height: u32,
    width: u32,
}

#[derive(Deserialize)]
struct CocoCategory {
    id: u32,
    name: String,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: u32,
    segmentation: Segmentation,
    #[serde(default)]
    iscrowd: u8,
    // bbox and area are accepted if present but deliberately ignored; both
    // are recomputed from the decoded mask.
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Segmentation {
    Polygons(Vec<Vec<f64>>),
    Rle { size: [u32; 2], counts: Counts },
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Counts {
    Compressed(String),
    Raw(Vec<u32>),
}

/// One line of a COCO results array. `mask_iou_pred` is a non-standard
/// extension written only when present, so standard five-key records stay
/// standard.
#[derive(Serialize, Deserialize)]
struct ResultRecord {
    image_id: u64,
    category_id: u32,
    segmentation: RleRecord,
    bbox: [f64; 4],
    score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask_iou_pred: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct RleRecord {
    size: [u32; 2],
    counts: String,
}

fn parse_json<T: DeserializeOwned>(text: &str) -> Result<T, CocoError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| CocoError::Parse {
        at: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

fn read_file(path: &Path) -> Result<String, CocoError> {
    std::fs::read_to_string(path)
        .map_err(|source| CocoError::Io { path: path.display().to_string(), source })
}

// ---------------------------------------------------------------------------
// Loading and writing
// ---------------------------------------------------------------------------

/// Loads a COCO annotation file. Polygons are rasterized, RLE decoded; every
/// annotation's bbox/area come from the decoded mask, and all id references
/// are checked.
pub fn load_coco(path: &Path) -> Result<Dataset, CocoError> {
    let file: CocoFile = parse_json(&read_file(path)?)?;

    let mut image_dims: HashMap<u64, (u32, u32)> = HashMap::new();
    for im in &file.images {
        if im.height == 0 || im.width == 0 {
            return Err(CocoError::Schema(format!("image {} has a zero extent", im.id)));
        }
        if image_dims.insert(im.id, (im.height, im.width)).is_some() {
            return Err(CocoError::Schema(format!("duplicate image id {}", im.id)));
        }
    }
    let mut category_ids: HashSet<u32> = HashSet::new();
    for cat in &file.categories {
        if !category_ids.insert(cat.id) {
            return Err(CocoError::Schema(format!("duplicate category id {}", cat.id)));
        }
    }

    let mut seen_ann_ids: HashSet<u64> = HashSet::new();
    let mut annotations = Vec::with_capacity(file.annotations.len());
    for ann in &file.annotations {
        if !seen_ann_ids.insert(ann.id) {
            return Err(CocoError::Schema(format!("duplicate annotation id {}", ann.id)));
        }
        let &(height, width) = image_dims.get(&ann.image_id).ok_or_else(|| {
            CocoError::Schema(format!(
                "annotation {} references unknown image_id {}",
                ann.id, ann.image_id
            ))
        })?;
        if !category_ids.contains(&ann.category_id) {
            return Err(CocoError::Schema(format!(
                "annotation {} references unknown category_id {}",
                ann.id, ann.category_id
            )));
        }
        let dense = match &ann.segmentation {
            Segmentation::Polygons(rings) => rasterize_polygons(rings, height, width)?,
            Segmentation::Rle { size, counts } => {
                if *size != [height, width] {
                    return Err(CocoError::Schema(format!(
                        "annotation {}: RLE size {:?} does not match image extent [{height}, {width}]",
                        ann.id, size
                    )));
                }
                let rle = match counts {
                    Counts::Compressed(s) => rle_from_string(s, height, width)?,
                    Counts::Raw(v) => RleMask { height, width, counts: v.clone() },
                };
                rle_decode(&rle)?
            }
        };
        annotations.push(Annotation::from_mask(
            ann.id,
            ann.image_id,
            ann.category_id,
            &dense,
            ann.iscrowd != 0,
        ));
    }

    Ok(Dataset {
        images: file
            .images
            .into_iter()
            .map(|im| ImageInfo {
                id: im.id,
                file_name: im.file_name,
                height: im.height,
                width: im.width,
            })
            .collect(),
        annotations,
        categories: file.categories.into_iter().map(|c| Category { id: c.id, name: c.name }).collect(),
    })
}

/// Writes a COCO annotation file (segmentation as compressed RLE strings).
/// [`load_coco`] reads the result back bit-exactly on masks.
pub fn write_coco(ds: &Dataset, path: &Path) -> Result<(), CocoError> {
    #[derive(Serialize)]
    struct ImageOut<'a> {
        id: u64,
        file_name: &'a str,
        height: u32,
        width: u32,
    }
    #[derive(Serialize)]
    struct AnnOut<'a> {
        id: u64,
        image_id: u64,
        category_id: u32,
        segmentation: RleRecord,
        bbox: [f64; 4],
        area: u64,
        iscrowd: u8,
        #[serde(skip)]
        _pd: std::marker::PhantomData<&'a ()>,
    }
    #[derive(Serialize)]
    struct CatOut<'a> {
        id: u32,
        name: &'a str,
    }
    #[derive(Serialize)]
    struct FileOut<'a> {
        images: Vec<ImageOut<'a>>,
        annotations: Vec<AnnOut<'a>>,
        categories: Vec<CatOut<'a>>,
    }

    let out = FileOut {
        images: ds
            .images
            .iter()
            .map(|im| ImageOut {
                id: im.id,
                file_name: &im.file_name,
                height: im.height,
                width: im.width,
            })
            .collect(),
        annotations: ds
            .annotations
            .iter()
            .map(|a| AnnOut {
                id: a.id,
                image_id: a.image_id,
                category_id: a.category_id,
                segmentation: RleRecord {
                    size: [a.mask.height, a.mask.width],
                    counts: rle_to_string(&a.mask),
                },
                bbox: [a.bbox.x, a.bbox.y, a.bbox.w, a.bbox.h],
                area: a.area,
                iscrowd: a.iscrowd as u8,
                _pd: std::marker::PhantomData,
            })
            .collect(),
        categories: ds.categories.iter().map(|c| CatOut { id: c.id, name: &c.name }).collect(),
    };
    let text = serde_json::to_string(&out).expect("serialization cannot fail");
    std::fs::write(path, text)
        .map_err(|source| CocoError::Io { path: path.display().to_string(), source })
}

/// Writes detections as a COCO results array. Masks go out as compressed RLE
/// strings; [`load_results`] inverts this bit-exactly.
pub fn write_results(dets: &[Detection], path: &Path) -> Result<(), CocoError> {
    let text = results_to_string(dets);
    std::fs::write(path, text)
        .map_err(|source| CocoError::Io { path: path.display().to_string(), source })
}

/// The results JSON as a string (also used for byte-level determinism checks).
pub fn results_to_string(dets: &[Detection]) -> String {
    let records: Vec<ResultRecord> = dets
        .iter()
        .map(|d| ResultRecord {
            image_id: d.image_id,
            category_id: d.category_id,
            segmentation: RleRecord {
                size: [d.mask.height, d.mask.width],
                counts: rle_to_string(&d.mask),
            },
            bbox: [d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h],
            score: d.score,
            mask_iou_pred: d.mask_iou_pred,
        })
        .collect();
    serde_json::to_string(&records).expect("serialization cannot fail")
}

/// Loads a COCO results array. Masks are validated (run sums must match the
/// stated extent) and re-encoded canonically; scores must lie in [0, 1].
pub fn load_results(path: &Path) -> Result<Vec<Detection>, CocoError> {
    let records: Vec<ResultRecord> = parse_json(&read_file(path)?)?;
    let mut dets = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        if !(0.0..=1.0).contains(&rec.score) {
            return Err(CocoError::Schema(format!(
                "result {i}: score {} outside [0, 1]",
                rec.score
            )));
        }
        if let Some(mi) = rec.mask_iou_pred {
            if !(0.0..=1.0).contains(&mi) {
                return Err(CocoError::Schema(format!(
                    "result {i}: mask_iou_pred {mi} outside [0, 1]"
                )));
            }
        }
        let [height, width] = rec.segmentation.size;
        if height == 0 || width == 0 {
            return Err(CocoError::Schema(format!("result {i}: zero mask extent")));
        }
        let rle = rle_from_string(&rec.segmentation.counts, height, width)?;
        let dense = rle_decode(&rle)?;
        let [x, y, w, h] = rec.bbox;
        dets.push(Detection {
            image_id: rec.image_id,
            category_id: rec.category_id,
            bbox: BBox::new(x, y, w, h),
            mask: rle_encode(&dense),
            score: rec.score,
            mask_iou_pred: rec.mask_iou_pred,
        });
    }
    Ok(dets)
}
