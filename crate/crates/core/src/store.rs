//! Dense per-modality embedding storage.
//!
//! On disk a store is two files: a little-endian binary matrix and a JSON-lines
//! manifest next to it (`<path>.jsonl`) holding one metadata object per row.
//!
//! Binary layout (24-byte header, then payload):
//!
//! | offset | size | field                         |
//! |--------|------|-------------------------------|
//! | 0      | 4    | magic `EBEM`                  |
//! | 4      | 2    | version (u16) = 1             |
//! | 6      | 2    | flags (u16), bit 0 normalized |
//! | 8      | 1    | modality code (u8)            |
//! | 9      | 3    | reserved, zero                |
//! | 12     | 8    | row count (u64)               |
//! | 20     | 4    | dim (u32)                     |
//! | 24     | ..   | count × dim f32, row-major    |

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{ItemId, ItemRecord, Modality, Split};

pub const MAGIC: [u8; 4] = *b"EBEM";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 24;
pub const DEFAULT_DIM: usize = 1024;

const FLAG_NORMALIZED: u16 = 1;
/// Rows with a norm at or below this are treated as zero vectors.
pub const ZERO_NORM: f64 = 1e-12;
/// Tolerance on the unit-norm invariant of normalized stores.
pub const UNIT_NORM_TOL: f64 = 1e-4;

/// Row-major matrix of one modality's embeddings plus aligned item metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    modality: Modality,
    dim: usize,
    data: Vec<f32>,
    items: Vec<ItemRecord>,
    normalized: bool,
}

impl EmbeddingStore {
    /// Builds a store, checking every invariant (finite entries, unique ids,
    /// unit rows when `normalized` is set).
    pub fn new(
        modality: Modality,
        dim: usize,
        data: Vec<f32>,
        items: Vec<ItemRecord>,
        normalized: bool,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("dim must be positive".into()));
        }
        if data.len() != items.len() * dim {
            return Err(Error::DimMismatch {
                expected: items.len() * dim,
                got: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("row {} of {modality} store", pos / dim)));
        }
        let mut seen = HashSet::with_capacity(items.len());
        for item in &items {
            if item.modality != modality {
                return Err(Error::InvalidArgument(format!(
                    "item {} is {} but the store holds {modality}",
                    item.id, item.modality
                )));
            }
            if !seen.insert(&item.id) {
                return Err(Error::InvalidArgument(format!("duplicate id {}", item.id)));
            }
        }
        let store = Self {
            modality,
            dim,
            data,
            items,
            normalized,
        };
        if normalized {
            for (i, row) in store.rows().enumerate() {
                let norm = row_norm(row);
                if (norm - 1.0).abs() > UNIT_NORM_TOL {
                    return Err(Error::InvalidArgument(format!(
                        "row {i} has norm {norm} but the store is flagged normalized"
                    )));
                }
            }
        }
        Ok(store)
    }

    pub fn empty(modality: Modality, dim: usize) -> Self {
        Self {
            modality,
            dim,
            data: Vec::new(),
            items: Vec::new(),
            normalized: true,
        }
    }

    /// Convenience constructor from rows; all items go to the train split under `dataset`.
    pub fn from_rows(
        modality: Modality,
        dataset: &str,
        rows: &[Vec<f32>],
        normalized: bool,
    ) -> Result<Self> {
        let dim = rows.first().map_or(1, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        let mut items = Vec::with_capacity(rows.len());
        for (i, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
            items.push(ItemRecord::train(ItemId::new(dataset, i as u64)?, modality));
        }
        Self::new(modality, dim, data, items, normalized)
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn items(&self) -> &[ItemRecord] {
        &self.items
    }

    pub fn ids(&self) -> impl Iterator<Item = &ItemId> {
        self.items.iter().map(|r| &r.id)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.dim)
    }

    /// Map from item id to row index.
    pub fn id_index(&self) -> HashMap<ItemId, usize> {
        self.items
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.clone(), i))
            .collect()
    }

    /// New store holding the given rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> EmbeddingStore {
        let mut data = Vec::with_capacity(rows.len() * self.dim);
        let mut items = Vec::with_capacity(rows.len());
        for &r in rows {
            data.extend_from_slice(self.row(r));
            items.push(self.items[r].clone());
        }
        EmbeddingStore {
            modality: self.modality,
            dim: self.dim,
            data,
            items,
            normalized: self.normalized,
        }
    }

    pub fn retain_rows(&self, mut keep: impl FnMut(&ItemRecord) -> bool) -> EmbeddingStore {
        let rows: Vec<usize> = (0..self.count()).filter(|&i| keep(&self.items[i])).collect();
        self.select(&rows)
    }

    /// Rows as f64 vectors.
    pub fn to_f64_rows(&self) -> Vec<Vec<f64>> {
        self.rows()
            .map(|r| r.iter().map(|&v| v as f64).collect())
            .collect()
    }

    /// Replaces the embedding matrix, keeping ids. Used after projecting a store.
    pub fn with_data(&self, dim: usize, data: Vec<f32>, normalized: bool) -> Result<Self> {
        Self::new(self.modality, dim, data, self.items.clone(), normalized)
    }

    pub fn into_parts(self) -> (Modality, usize, Vec<f32>, Vec<ItemRecord>, bool) {
        (self.modality, self.dim, self.data, self.items, self.normalized)
    }
}

pub(crate) fn row_norm(row: &[f32]) -> f64 {
    row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
}

/// Divides every row by its Euclidean norm.
pub fn l2_normalize(store: EmbeddingStore) -> Result<EmbeddingStore> {
    let EmbeddingStore {
        modality,
        dim,
        mut data,
        items,
        ..
    } = store;
    for (i, row) in data.chunks_exact_mut(dim).enumerate() {
        let norm = row_norm(row);
        if norm <= ZERO_NORM {
            return Err(Error::ZeroVector(i));
        }
        for v in row.iter_mut() {
            *v = (*v as f64 / norm) as f32;
        }
    }
    Ok(EmbeddingStore {
        modality,
        dim,
        data,
        items,
        normalized: true,
    })
}

/// Coordinate-wise mean of `rows`, optionally renormalized to unit length.
pub fn mean_pool<R: AsRef<[f32]>>(rows: &[R], renormalize: bool) -> Result<Vec<f32>> {
    let first = rows
        .first()
        .ok_or_else(|| Error::InvalidArgument("mean_pool needs at least one row".into()))?;
    let dim = first.as_ref().len();
    let mut acc = vec![0f64; dim];
    for row in rows {
        let row = row.as_ref();
        if row.len() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                got: row.len(),
            });
        }
        for (a, &v) in acc.iter_mut().zip(row) {
            if !v.is_finite() {
                return Err(Error::NonFinite("mean_pool input".into()));
            }
            *a += v as f64;
        }
    }
    let n = rows.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    if renormalize {
        let norm = acc.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm <= ZERO_NORM {
            return Err(Error::ZeroVector(0));
        }
        acc.iter_mut().for_each(|a| *a /= norm);
    }
    Ok(acc.into_iter().map(|a| a as f32).collect())
}

/// Path of the JSON-lines manifest that accompanies a binary store file.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".jsonl");
    PathBuf::from(s)
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    dataset: String,
    local_id: u64,
    uri: Option<String>,
    caption: Option<String>,
    splits: Vec<Split>,
}

/// Writes the binary matrix (header + payload) to `w`.
pub fn write_matrix<W: Write>(store: &EmbeddingStore, mut w: W) -> Result<()> {
    let mut header = [0u8; HEADER_LEN];
    header[0..4].copy_from_slice(&MAGIC);
    header[4..6].copy_from_slice(&FORMAT_VERSION.to_le_bytes());
    let flags = if store.normalized { FLAG_NORMALIZED } else { 0 };
    header[6..8].copy_from_slice(&flags.to_le_bytes());
    header[8] = store.modality.code();
    header[12..20].copy_from_slice(&(store.count() as u64).to_le_bytes());
    let dim = u32::try_from(store.dim)
        .map_err(|_| Error::Format(format!("dim {} does not fit in u32", store.dim)))?;
    header[20..24].copy_from_slice(&dim.to_le_bytes());
    w.write_all(&header)?;
    let mut buf = Vec::with_capacity(store.data.len() * 4);
    for v in &store.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

/// Header fields of a binary store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatrixHeader {
    pub modality: Modality,
    pub count: usize,
    pub dim: usize,
    pub normalized: bool,
}

/// Reads the binary matrix; returns header fields and the raw payload.
pub fn read_matrix<R: Read>(mut r: R) -> Result<(MatrixHeader, Vec<f32>)> {
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated header".into()),
        _ => Error::Io(e),
    })?;
    if header[0..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &header[0..4])));
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let flags = u16::from_le_bytes([header[6], header[7]]);
    let modality = Modality::from_code(header[8])
        .ok_or_else(|| Error::Format(format!("unknown modality code {}", header[8])))?;
    let count = u64::from_le_bytes(header[12..20].try_into().unwrap());
    let dim = u32::from_le_bytes(header[20..24].try_into().unwrap()) as usize;
    if dim == 0 {
        return Err(Error::Format("dim is zero".into()));
    }
    let payload_len = usize::try_from(count)
        .ok()
        .and_then(|c| c.checked_mul(dim))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format("count × dim overflows".into()))?;
    let mut bytes = Vec::new();
    r.by_ref()
        .take(payload_len as u64)
        .read_to_end(&mut bytes)?;
    if bytes.len() != payload_len {
        return Err(Error::Format(format!(
            "truncated payload: expected {payload_len} bytes, found {}",
            bytes.len()
        )));
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((
        MatrixHeader {
            modality,
            count: count as usize,
            dim,
            normalized: flags & FLAG_NORMALIZED != 0,
        },
        data,
    ))
}

/// Saves a store as `path` (binary) plus `path.jsonl` (manifest).
pub fn save_store(store: &EmbeddingStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_matrix(store, BufWriter::new(File::create(path)?))?;
    let mut w = BufWriter::new(File::create(manifest_path(path))?);
    for item in &store.items {
        let row = ManifestRow {
            dataset: item.id.dataset.clone(),
            local_id: item.id.local_id,
            uri: item.uri.clone(),
            caption: item.caption.clone(),
            splits: item.splits.iter().copied().collect(),
        };
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Loads a store exactly as saved; the normalized flag is taken from the file.
pub fn load_store(path: impl AsRef<Path>) -> Result<EmbeddingStore> {
    let path = path.as_ref();
    let (header, data) = read_matrix(BufReader::new(File::open(path)?))?;
    let manifest = BufReader::new(File::open(manifest_path(path))?);
    let mut items = Vec::with_capacity(header.count);
    for (lineno, line) in manifest.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: ManifestRow = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("manifest line {}: {e}", lineno + 1)))?;
        items.push(ItemRecord {
            id: ItemId::new(row.dataset, row.local_id)?,
            modality: header.modality,
            uri: row.uri,
            caption: row.caption,
            splits: row.splits.into_iter().collect::<BTreeSet<_>>(),
        });
    }
    if items.len() != header.count {
        return Err(Error::Format(format!(
            "manifest has {} rows but the header says {}",
            items.len(),
            header.count
        )));
    }
    EmbeddingStore::new(header.modality, header.dim, data, items, header.normalized)
        .map_err(|e| Error::Format(e.to_string()))
}

/// Loads a store and unit-normalizes it unless the file is already flagged normalized.
pub fn load_store_normalized(path: impl AsRef<Path>) -> Result<EmbeddingStore> {
    let store = load_store(path)?;
    if store.is_normalized() {
        Ok(store)
    } else {
        l2_normalize(store)
    }
}
