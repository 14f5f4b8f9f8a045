//! `KMC1` model files.
//!
//! Layout (little-endian): magic `b"KMC1"` | version u32 | k u32 | d u32 |
//! centroids k*d f32 (one centroid after another) | N u64 | labels N u32.
//!
//! The provenance of the centroids is recorded in `<path>.meta.json` as
//! `{"provenance": "kmeans"}`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Centroids;
use crate::embedding::sidecar_path;
use crate::error::{Error, Result};

pub const KMC_MAGIC: [u8; 4] = *b"KMC1";
pub const KMC_VERSION: u32 = 1;
pub const PROVENANCE_KMEANS: &str = "kmeans";

#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub centroids: Centroids,
    pub labels: Vec<usize>,
    pub provenance: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    provenance: String,
}

pub fn write_model(model: &ModelFile, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let c = &model.centroids;
    let to_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::Shape(format!("{what} {v} does not fit in u32")))
    };
    let mut buf = Vec::with_capacity(28 + c.as_slice().len() * 4 + model.labels.len() * 4);
    buf.extend_from_slice(&KMC_MAGIC);
    buf.extend_from_slice(&KMC_VERSION.to_le_bytes());
    buf.extend_from_slice(&to_u32(c.k(), "k")?.to_le_bytes());
    buf.extend_from_slice(&to_u32(c.dim(), "dim")?.to_le_bytes());
    for v in c.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&(model.labels.len() as u64).to_le_bytes());
    for &l in &model.labels {
        buf.extend_from_slice(&to_u32(l, "label")?.to_le_bytes());
    }
    fs::write(path, &buf).map_err(|e| Error::io(path, e))?;

    let meta_path = sidecar_path(path);
    match &model.provenance {
        Some(p) => {
            let text = serde_json::to_string(&Meta {
                provenance: p.clone(),
            })
            .expect("meta serializes");
            fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))?;
        }
        None if meta_path.exists() => {
            fs::remove_file(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        }
        None => {}
    }
    Ok(())
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                path: self.path.into(),
                expected: (self.pos + n) as u64,
                found: self.bytes.len() as u64,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_model(path: impl AsRef<Path>) -> Result<ModelFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 4 || bytes[..4] != KMC_MAGIC {
        let mut found = [0u8; 4];
        let n = bytes.len().min(4);
        found[..n].copy_from_slice(&bytes[..n]);
        return Err(Error::BadMagic {
            path: path.into(),
            expected: KMC_MAGIC,
            found,
        });
    }
    let mut cur = Cursor {
        path,
        bytes: &bytes,
        pos: 4,
    };
    let version = cur.u32()?;
    if version != KMC_VERSION {
        return Err(Error::VersionMismatch {
            path: path.into(),
            expected: KMC_VERSION,
            found: version,
        });
    }
    let k = cur.u32()? as usize;
    let dim = cur.u32()? as usize;
    let centroid_bytes = cur.take(k * dim * 4)?;
    let data = centroid_bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let centroids = Centroids::new(dim, data)?;
    let n = cur.u64()? as usize;
    let labels: Vec<usize> = cur
        .take(n.checked_mul(4).ok_or_else(|| Error::Shape("label count overflows".into()))?)?
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
        .collect();
    if cur.pos != bytes.len() {
        return Err(Error::Truncated {
            path: path.into(),
            expected: cur.pos as u64,
            found: bytes.len() as u64,
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Shape(format!(
            "{}: label {bad} outside [0, {k})",
            path.display()
        )));
    }

    let meta_path = sidecar_path(path);
    let provenance = if meta_path.exists() {
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: Meta = serde_json::from_str(&text).map_err(|e| Error::Sidecar {
            path: meta_path.clone(),
            message: e.to_string(),
        })?;
        Some(meta.provenance)
    } else {
        None
    };

    Ok(ModelFile {
        centroids,
        labels,
        provenance,
    })
}
