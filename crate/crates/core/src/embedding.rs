//! Embedding storage: the `EMB1` binary format, JSON id sidecar,
//! validation and L2 normalization.
//!
//! Format (little-endian):
//! - magic: `b"EMB1"`
//! - version: u32 (= 1)
//! - count: u64
//! - dim: u32
//! - payload: count * dim f32, row-major
//!
//! Ids default to row position. Non-default ids (and an optional free-form
//! `source` string) live in `<path>.meta.json` as `{"ids": [...], "source": "..."}`.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EMB_MAGIC: [u8; 4] = *b"EMB1";
pub const EMB_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 4;

/// Maximum allowed deviation of a row norm from 1 after normalization.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-5;

/// An N x d row-major matrix of f32 embeddings plus one id per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    data: Vec<f32>,
    ids: Vec<u64>,
    source: Option<String>,
}

impl EmbeddingSet {
    /// Builds a set with ids `0..N`.
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Shape("embedding dimension must be positive".into()));
        }
        if data.len() % dim != 0 {
            return Err(Error::Shape(format!(
                "data length {} is not a multiple of dim {dim}",
                data.len()
            )));
        }
        let ids = (0..(data.len() / dim) as u64).collect();
        Ok(Self {
            dim,
            data,
            ids,
            source: None,
        })
    }

    pub fn with_ids(dim: usize, data: Vec<f32>, ids: Vec<u64>) -> Result<Self> {
        let mut set = Self::new(dim, data)?;
        if ids.len() != set.len() {
            return Err(Error::Shape(format!(
                "{} ids for {} rows",
                ids.len(),
                set.len()
            )));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for &id in &ids {
            if !seen.insert(id) {
                return Err(Error::DuplicateId { id });
            }
        }
        set.ids = ids;
        Ok(set)
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let dim = rows
            .first()
            .map(|r| r.as_ref().len())
            .ok_or_else(|| Error::Shape("cannot infer dim from zero rows".into()))?;
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != dim {
                return Err(Error::Shape(format!(
                    "row {i} has {} values, expected {dim}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Self::new(dim, data)
    }

    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source = Some(source.into());
        self
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn source(&self) -> Option<&str> {
        self.source.as_deref()
    }

    fn has_default_ids(&self) -> bool {
        self.ids.iter().enumerate().all(|(i, &id)| id == i as u64)
    }

    /// Rows at `indices`, in that order, carrying their ids along.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        let mut ids = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Shape(format!(
                    "index {i} out of range for {} rows",
                    self.len()
                )));
            }
            data.extend_from_slice(self.row(i));
            ids.push(self.ids[i]);
        }
        let mut out = Self::with_ids(self.dim, data, ids)?;
        out.source = self.source.clone();
        Ok(out)
    }
}

/// Findings of [`validate`]. A clean set has no NaN/Inf and no zero rows.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub nan_count: usize,
    pub inf_count: usize,
    pub zero_rows: Vec<usize>,
    /// Largest `| ||row|| - 1 |` over rows whose entries are all finite.
    pub norm_deviation_max: f64,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.nan_count == 0 && self.inf_count == 0 && self.zero_rows.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.is_clean() && self.norm_deviation_max <= UNIT_NORM_TOLERANCE
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Sidecar {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ids: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source: Option<String>,
}

/// `<path>.meta.json`
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".meta.json");
    PathBuf::from(name)
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut set = decode_embeddings(path, &bytes)?;

    let meta_path = sidecar_path(path);
    if meta_path.exists() {
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: Sidecar = serde_json::from_str(&text).map_err(|e| Error::Sidecar {
            path: meta_path.clone(),
            message: e.to_string(),
        })?;
        if let Some(ids) = meta.ids {
            set = EmbeddingSet::with_ids(set.dim, set.data, ids).map_err(|e| Error::Sidecar {
                path: meta_path.clone(),
                message: e.to_string(),
            })?;
        }
        set.source = meta.source;
    }
    Ok(set)
}

fn decode_embeddings(path: &Path, bytes: &[u8]) -> Result<EmbeddingSet> {
    if bytes.len() < 4 || bytes[..4] != EMB_MAGIC {
        let mut found = [0u8; 4];
        let n = bytes.len().min(4);
        found[..n].copy_from_slice(&bytes[..n]);
        return Err(Error::BadMagic {
            path: path.into(),
            expected: EMB_MAGIC,
            found,
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            path: path.into(),
            expected: HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != EMB_VERSION {
        return Err(Error::VersionMismatch {
            path: path.into(),
            expected: EMB_VERSION,
            found: version,
        });
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let dim = u32::from_le_bytes(bytes[16..20].try_into().unwrap());
    if dim == 0 {
        return Err(Error::Shape(format!("{}: header declares dim 0", path.display())));
    }

    let payload = &bytes[HEADER_LEN..];
    let expected = count
        .checked_mul(dim as u64)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::Shape(format!("{}: header size overflows", path.display())))?;
    if payload.len() as u64 != expected {
        return Err(Error::Truncated {
            path: path.into(),
            expected,
            found: payload.len() as u64,
        });
    }

    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    EmbeddingSet::new(dim as usize, data)
}

/// Writes the binary file and, when ids are not the default `0..N` or a
/// source is set, the JSON sidecar. A stale sidecar is removed otherwise.
pub fn write_embeddings(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let dim = u32::try_from(set.dim)
        .map_err(|_| Error::Shape(format!("dim {} does not fit in u32", set.dim)))?;

    let mut buf = Vec::with_capacity(HEADER_LEN + set.data.len() * 4);
    buf.extend_from_slice(&EMB_MAGIC);
    buf.extend_from_slice(&EMB_VERSION.to_le_bytes());
    buf.extend_from_slice(&(set.len() as u64).to_le_bytes());
    buf.extend_from_slice(&dim.to_le_bytes());
    for v in &set.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, &buf).map_err(|e| Error::io(path, e))?;

    let meta_path = sidecar_path(path);
    let meta = Sidecar {
        ids: (!set.has_default_ids()).then(|| set.ids.clone()),
        source: set.source.clone(),
    };
    if meta.ids.is_some() || meta.source.is_some() {
        let text = serde_json::to_string(&meta).expect("sidecar serializes");
        fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))?;
    } else if meta_path.exists() {
        fs::remove_file(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    }
    Ok(())
}

/// Divides each row by its L2 norm (accumulated in f64).
pub fn normalize(set: &EmbeddingSet) -> Result<EmbeddingSet> {
    let mut data = Vec::with_capacity(set.data.len());
    for (i, row) in set.rows().enumerate() {
        let norm = l2_norm(row);
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("row {i} has non-finite norm")));
        }
        if norm == 0.0 {
            return Err(Error::ZeroRow { row: i });
        }
        data.extend(row.iter().map(|&v| (v as f64 / norm) as f32));
    }
    Ok(EmbeddingSet {
        dim: set.dim,
        data,
        ids: set.ids.clone(),
        source: set.source.clone(),
    })
}

pub fn validate(set: &EmbeddingSet) -> ValidationReport {
    let mut report = ValidationReport::default();
    for (i, row) in set.rows().enumerate() {
        let mut finite = true;
        for &v in row {
            if v.is_nan() {
                report.nan_count += 1;
                finite = false;
            } else if v.is_infinite() {
                report.inf_count += 1;
                finite = false;
            }
        }
        if row.iter().all(|&v| v == 0.0) {
            report.zero_rows.push(i);
        }
        if finite {
            let dev = (l2_norm(row) - 1.0).abs();
            report.norm_deviation_max = report.norm_deviation_max.max(dev);
        }
    }
    report
}

pub(crate) fn l2_norm(row: &[f32]) -> f64 {
    row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
}
