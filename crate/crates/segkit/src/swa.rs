//! Checkpoint weight averaging and the SWA1 tensor-archive format.
//!
//! Averaging is equal-weight, accumulated in f64 and rounded back to f32.
//! To make the result bitwise independent of the order the caller lists
//! checkpoints in, inputs are first sorted by their canonical archive bytes
//! (a total order on content, stronger than a digest) and then accumulated
//! left to right.
//!
//! Archive layout, all little-endian: magic `SWA1`, u32 tensor count; per
//! tensor: u16 name byte-length, name bytes (UTF-8), u8 rank, rank×u32 dims,
//! product×f32 data. Tensors are written in name-lexicographic order, so
//! write∘read and read∘write are byte-level identities.

use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"SWA1";

#[derive(Debug, Error)]
pub enum SwaError {
    #[error("cannot average an empty checkpoint list")]
    EmptyList,
    #[error("checkpoint schema mismatch at tensor {name:?}: {reason}")]
    SchemaMismatch { name: String, reason: String },
    #[error("bad archive {path}: {reason}")]
    Format { path: String, reason: String },
    #[error("cannot access {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl Tensor {
    /// Panics if the data length does not match the dims product or any
    /// extent is zero.
    pub fn new(dims: Vec<u32>, data: Vec<f32>) -> Tensor {
        let product: u64 = dims.iter().map(|&d| d as u64).product();
        assert!(dims.iter().all(|&d| d > 0), "tensor extents must be positive");
        assert_eq!(data.len() as u64, product, "tensor data length mismatch");
        Tensor { dims, data }
    }
}

/// Named tensors with name-lexicographic iteration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    entries: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new() -> Checkpoint {
        Checkpoint::default()
    }

    /// Inserts or replaces a tensor.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Name-lexicographic iteration.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }
}

/// Elementwise equal-weight mean of the checkpoints. All inputs must carry
/// identical tensor names and dims; the first differing name is reported.
/// Bitwise permutation-invariant in the input order.
pub fn average_checkpoints(cks: &[Checkpoint]) -> Result<Checkpoint, SwaError> {
    let first = cks.first().ok_or(SwaError::EmptyList)?;
    for other in &cks[1..] {
        check_same_schema(first, other)?;
    }

    // Canonical-bytes sort fixes the accumulation order regardless of how
    // the caller ordered the list.
    let mut order: Vec<usize> = (0..cks.len()).collect();
    let keys: Vec<Vec<u8>> = cks.iter().map(archive_bytes).collect();
    order.sort_by(|&a, &b| keys[a].cmp(&keys[b]));

    let k = cks.len() as f64;
    let mut out = Checkpoint::new();
    for (name, template) in first.iter() {
        let mut acc = vec![0.0f64; template.data.len()];
        for &ci in &order {
            let tensor = cks[ci].get(name).expect("schema checked above");
            for (a, &v) in acc.iter_mut().zip(&tensor.data) {
                *a += v as f64;
            }
        }
        let data: Vec<f32> = acc.iter().map(|&a| (a / k) as f32).collect();
        out.insert(name, Tensor { dims: template.dims.clone(), data });
    }
    Ok(out)
}

fn check_same_schema(a: &Checkpoint, b: &Checkpoint) -> Result<(), SwaError> {
    let mut ia = a.iter();
    let mut ib = b.iter();
    loop {
        match (ia.next(), ib.next()) {
            (None, None) => return Ok(()),
            (Some((name, _)), None) | (None, Some((name, _))) => {
                return Err(SwaError::SchemaMismatch {
                    name: name.to_string(),
                    reason: "tensor present in one checkpoint but not the other".into(),
                })
            }
            (Some((na, ta)), Some((nb, tb))) => {
                if na != nb {
                    return Err(SwaError::SchemaMismatch {
                        name: na.min(nb).to_string(),
                        reason: "tensor present in one checkpoint but not the other".into(),
                    });
                }
                if ta.dims != tb.dims {
                    return Err(SwaError::SchemaMismatch {
                        name: na.to_string(),
                        reason: format!("dims differ: {:?} vs {:?}", ta.dims, tb.dims),
                    });
                }
            }
        }
    }
}

/// Canonical SWA1 bytes for a checkpoint (what [`write_archive`] writes).
pub fn archive_bytes(ck: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(ck.len() as u32).to_le_bytes());
    for (name, tensor) in ck.iter() {
        let name_bytes = name.as_bytes();
        assert!(name_bytes.len() <= u16::MAX as usize, "tensor name too long for SWA1");
        assert!(tensor.dims.len() <= u8::MAX as usize, "tensor rank too large for SWA1");
        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.push(tensor.dims.len() as u8);
        for &d in &tensor.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in &tensor.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_archive(ck: &Checkpoint, path: &Path) -> Result<(), SwaError> {
    std::fs::write(path, archive_bytes(ck))
        .map_err(|source| SwaError::Io { path: path.display().to_string(), source })
}

pub fn read_archive(path: &Path) -> Result<Checkpoint, SwaError> {
    let bytes = std::fs::read(path)
        .map_err(|source| SwaError::Io { path: path.display().to_string(), source })?;
    parse_archive(&bytes, &path.display().to_string())
}

fn parse_archive(bytes: &[u8], path: &str) -> Result<Checkpoint, SwaError> {
    let fail = |reason: &str| SwaError::Format { path: path.to_string(), reason: reason.into() };
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8], SwaError> {
        let end = pos.checked_add(n).ok_or_else(|| fail("length overflow"))?;
        if end > bytes.len() {
            return Err(fail("truncated archive"));
        }
        let slice = &bytes[pos..end];
        pos = end;
        Ok(slice)
    };

    if take(4)? != MAGIC {
        return Err(fail("bad magic (expected SWA1)"));
    }
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap());
    let mut ck = Checkpoint::new();
    let mut last_name: Option<String> = None;
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(name_len)?)
            .map_err(|_| fail("tensor name is not UTF-8"))?
            .to_string();
        if let Some(prev) = &last_name {
            if *prev >= name {
                return Err(fail("tensor names out of lexicographic order or duplicated"));
            }
        }
        let rank = take(1)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = u32::from_le_bytes(take(4)?.try_into().unwrap());
            if d == 0 {
                return Err(fail("zero tensor extent"));
            }
            dims.push(d);
        }
        let product: u64 = dims.iter().map(|&d| d as u64).product();
        if product > (bytes.len() as u64) / 4 + 1 {
            return Err(fail("truncated archive"));
        }
        let raw = take(product as usize * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        last_name = Some(name.clone());
        ck.insert(name, Tensor { dims, data });
    }
    if pos != bytes.len() {
        return Err(fail("trailing bytes after last tensor"));
    }
    Ok(ck)
}
