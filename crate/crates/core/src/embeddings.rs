//! Id-keyed embedding matrices and the `SHTE` binary container.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic   "SHTE"            4 bytes
//! version u32 = 1
//! kind    u8                0 frame, 1 text, 2 scene
//! dim     u32
//! count   u32
//! norm    u8                1 when every row has unit L2 norm
//! ids     count records     frame/scene: u16 len + UTF-8 video id, f64 timestamp
//!                           text:        u16 len + UTF-8 key
//! vectors count*dim f32     row-major
//! ```
//!
//! Cosine similarity is the only similarity used anywhere in the crate.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::hash::{Hash, Hasher};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;

pub const MAGIC: [u8; 4] = *b"SHTE";
pub const FORMAT_VERSION: u32 = 1;
/// Allowed deviation of a row norm from 1 for a store flagged as normalized.
pub const NORM_TOLERANCE: f64 = 1e-4;
const HEADER_LEN: usize = 18;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {0:?}, expected \"SHTE\"")]
    MagicMismatch([u8; 4]),
    #[error("unsupported store version {0}")]
    VersionUnsupported(u32),
    #[error("unknown store kind code {0}")]
    UnknownKind(u8),
    #[error("store file is truncated")]
    TruncatedFile,
    #[error("{0} unexpected bytes after the last vector")]
    TrailingBytes(usize),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("row {0} is a zero vector")]
    ZeroVector(usize),
    #[error("store is not unit-normalized")]
    NotNormalized,
    #[error("row {row} has norm {norm}, outside the unit tolerance")]
    NormOutOfTolerance { row: usize, norm: f64 },
    #[error("gallery is empty after exclusions")]
    EmptyGallery,
    #[error("duplicate id {0}")]
    DuplicateId(EntryId),
    #[error("id {id} does not belong in a {kind:?} store")]
    KindMismatch { id: EntryId, kind: StoreKind },
    #[error("invalid id record: {0}")]
    InvalidId(String),
    #[error("unknown id {0}")]
    UnknownId(EntryId),
    #[error("store has {ids} ids but {values} values for dim {dim}")]
    Shape { ids: usize, values: usize, dim: usize },
    #[error("non-finite value in row {0}")]
    NonFinite(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StoreKind {
    Frame,
    Text,
    Scene,
}

impl StoreKind {
    fn code(self) -> u8 {
        match self {
            StoreKind::Frame => 0,
            StoreKind::Text => 1,
            StoreKind::Scene => 2,
        }
    }

    fn from_code(code: u8) -> Result<Self, EmbeddingError> {
        match code {
            0 => Ok(StoreKind::Frame),
            1 => Ok(StoreKind::Text),
            2 => Ok(StoreKind::Scene),
            other => Err(EmbeddingError::UnknownKind(other)),
        }
    }

    /// Frame and scene stores are keyed by `(video_id, timestamp)`.
    pub fn is_temporal(self) -> bool {
        !matches!(self, StoreKind::Text)
    }
}

/// A frame of a video. Equality and ordering use the exact bit pattern of the
/// timestamp, so ids behave as keys.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameRef {
    pub video_id: String,
    pub timestamp: f64,
}

impl FrameRef {
    pub fn new(video_id: impl Into<String>, timestamp: f64) -> Self {
        Self { video_id: video_id.into(), timestamp }
    }
}

impl PartialEq for FrameRef {
    fn eq(&self, other: &Self) -> bool {
        self.video_id == other.video_id && self.timestamp.to_bits() == other.timestamp.to_bits()
    }
}
impl Eq for FrameRef {}

impl Hash for FrameRef {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.video_id.hash(state);
        self.timestamp.to_bits().hash(state);
    }
}

impl Ord for FrameRef {
    fn cmp(&self, other: &Self) -> Ordering {
        self.video_id
            .cmp(&other.video_id)
            .then_with(|| self.timestamp.total_cmp(&other.timestamp))
    }
}
impl PartialOrd for FrameRef {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Row key. The derived order is the canonical order used for tie-breaking.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EntryId {
    Frame(FrameRef),
    Text(String),
}

impl EntryId {
    pub fn frame(video_id: impl Into<String>, timestamp: f64) -> Self {
        EntryId::Frame(FrameRef::new(video_id, timestamp))
    }

    pub fn text(key: impl Into<String>) -> Self {
        EntryId::Text(key.into())
    }

    pub fn video_id(&self) -> Option<&str> {
        match self {
            EntryId::Frame(f) => Some(&f.video_id),
            EntryId::Text(_) => None,
        }
    }

    pub fn timestamp(&self) -> Option<f64> {
        match self {
            EntryId::Frame(f) => Some(f.timestamp),
            EntryId::Text(_) => None,
        }
    }
}

impl fmt::Display for EntryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EntryId::Frame(r) => write!(f, "{}@{}", r.video_id, r.timestamp),
            EntryId::Text(k) => write!(f, "{k:?}"),
        }
    }
}

/// Dense row-major matrix of feature vectors with one id per row.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    kind: StoreKind,
    dim: usize,
    ids: Vec<EntryId>,
    data: Vec<f32>,
    normalized: bool,
    index: HashMap<EntryId, usize>,
}

impl PartialEq for EmbeddingStore {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind
            && self.dim == other.dim
            && self.normalized == other.normalized
            && self.ids == other.ids
            && self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl EmbeddingStore {
    /// Builds a store from row-major `data`; the normalized flag is derived
    /// from the row norms.
    pub fn new(kind: StoreKind, dim: usize, ids: Vec<EntryId>, data: Vec<f32>) -> Result<Self, EmbeddingError> {
        let mut store = Self::from_parts(kind, dim, ids, data, false)?;
        store.normalized = !store.is_empty() && store.check_norms().is_ok();
        Ok(store)
    }

    fn from_parts(
        kind: StoreKind,
        dim: usize,
        ids: Vec<EntryId>,
        data: Vec<f32>,
        normalized: bool,
    ) -> Result<Self, EmbeddingError> {
        if dim == 0 || ids.len().checked_mul(dim) != Some(data.len()) {
            return Err(EmbeddingError::Shape { ids: ids.len(), values: data.len(), dim });
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (row, id) in ids.iter().enumerate() {
            if kind.is_temporal() != matches!(id, EntryId::Frame(_)) {
                return Err(EmbeddingError::KindMismatch { id: id.clone(), kind });
            }
            if index.insert(id.clone(), row).is_some() {
                return Err(EmbeddingError::DuplicateId(id.clone()));
            }
        }
        if let Some(row) = (0..ids.len()).find(|&r| data[r * dim..(r + 1) * dim].iter().any(|v| !v.is_finite())) {
            return Err(EmbeddingError::NonFinite(row));
        }
        let store = Self { kind, dim, ids, data, normalized, index };
        if normalized {
            store.check_norms()?;
        }
        Ok(store)
    }

    /// Convenience constructor from per-row vectors.
    pub fn from_rows(kind: StoreKind, ids: Vec<EntryId>, rows: Vec<Vec<f32>>) -> Result<Self, EmbeddingError> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(EmbeddingError::DimMismatch { expected: dim, found: bad.len() });
        }
        Self::new(kind, dim, ids, rows.concat())
    }

    pub fn kind(&self) -> StoreKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn ids(&self) -> &[EntryId] {
        &self.ids
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn position(&self, id: &EntryId) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn row_of(&self, id: &EntryId) -> Result<&[f32], EmbeddingError> {
        self.position(id).map(|i| self.row(i)).ok_or_else(|| EmbeddingError::UnknownId(id.clone()))
    }

    /// Timestamps of a temporal store, in row order.
    pub fn timestamps(&self) -> Vec<f64> {
        self.ids.iter().filter_map(EntryId::timestamp).collect()
    }

    /// A new store holding the rows for `ids`, in that order.
    pub fn select(&self, ids: &[EntryId]) -> Result<Self, EmbeddingError> {
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        for id in ids {
            data.extend_from_slice(self.row_of(id)?);
        }
        let normalized = self.normalized && !ids.is_empty();
        Self::from_parts(self.kind, self.dim, ids.to_vec(), data, normalized)
    }

    /// Every value multiplied by `factor`. The result is flagged normalized
    /// only if its rows really are.
    pub fn scaled(&self, factor: f32) -> Result<Self, EmbeddingError> {
        Self::new(self.kind, self.dim, self.ids.clone(), self.data.iter().map(|v| v * factor).collect())
    }

    fn check_norms(&self) -> Result<(), EmbeddingError> {
        for (row, v) in self.rows().enumerate() {
            let norm = l2_norm(v);
            if (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(EmbeddingError::NormOutOfTolerance { row, norm });
            }
        }
        Ok(())
    }

    // -- binary format ------------------------------------------------------

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.ids.len() * 24 + self.data.len() * 4);
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), EmbeddingError> {
        let count = u32::try_from(self.len()).map_err(|_| EmbeddingError::InvalidId("too many rows".into()))?;
        let dim = u32::try_from(self.dim).map_err(|_| EmbeddingError::InvalidId("dimension too large".into()))?;
        w.write_all(&MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&[self.kind.code()])?;
        w.write_all(&dim.to_le_bytes())?;
        w.write_all(&count.to_le_bytes())?;
        w.write_all(&[u8::from(self.normalized)])?;
        for id in &self.ids {
            let (key, ts) = match id {
                EntryId::Frame(f) => (f.video_id.as_str(), Some(f.timestamp)),
                EntryId::Text(k) => (k.as_str(), None),
            };
            let len = u16::try_from(key.len()).map_err(|_| EmbeddingError::InvalidId(format!("id longer than 65535 bytes: {id}")))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(key.as_bytes())?;
            if let Some(ts) = ts {
                w.write_all(&ts.to_le_bytes())?;
            }
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EmbeddingError> {
        Self::read_from(&mut &bytes[..])
    }

    /// Reads a store; the header is fully validated before any id or vector
    /// is read.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, EmbeddingError> {
        let mut header = [0u8; HEADER_LEN];
        read_exact(r, &mut header)?;
        let magic: [u8; 4] = header[0..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(EmbeddingError::MagicMismatch(magic));
        }
        let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(EmbeddingError::VersionUnsupported(version));
        }
        let kind = StoreKind::from_code(header[8])?;
        let dim = u32::from_le_bytes(header[9..13].try_into().unwrap()) as usize;
        let count = u32::from_le_bytes(header[13..17].try_into().unwrap()) as usize;
        let normalized = match header[17] {
            0 => false,
            1 => true,
            other => return Err(EmbeddingError::InvalidId(format!("normalized flag must be 0 or 1, found {other}"))),
        };
        if dim == 0 {
            return Err(EmbeddingError::DimMismatch { expected: 1, found: 0 });
        }

        let mut ids = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let mut len = [0u8; 2];
            read_exact(r, &mut len)?;
            let mut key = vec![0u8; u16::from_le_bytes(len) as usize];
            read_exact(r, &mut key)?;
            let key = String::from_utf8(key).map_err(|e| EmbeddingError::InvalidId(e.to_string()))?;
            ids.push(if kind.is_temporal() {
                let mut ts = [0u8; 8];
                read_exact(r, &mut ts)?;
                EntryId::frame(key, f64::from_le_bytes(ts))
            } else {
                EntryId::Text(key)
            });
        }

        let values = count.checked_mul(dim).ok_or(EmbeddingError::TruncatedFile)?;
        let mut data = Vec::with_capacity(values.min(1 << 24));
        let mut buf = [0u8; 4];
        for _ in 0..values {
            read_exact(r, &mut buf)?;
            data.push(f32::from_le_bytes(buf));
        }
        let mut trailing = Vec::new();
        r.read_to_end(&mut trailing)?;
        if !trailing.is_empty() {
            return Err(EmbeddingError::TrailingBytes(trailing.len()));
        }
        Self::from_parts(kind, dim, ids, data, normalized)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EmbeddingError> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    /// Writes atomically: a sibling temp file renamed over `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EmbeddingError> {
        let path = path.as_ref();
        let tmp = path.with_extension("shte.tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            self.write_to(&mut w)?;
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), EmbeddingError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => EmbeddingError::TruncatedFile,
        _ => EmbeddingError::Io(e),
    })
}

pub fn load_store(path: impl AsRef<Path>) -> Result<EmbeddingStore, EmbeddingError> {
    EmbeddingStore::load(path)
}

pub fn save_store(store: &EmbeddingStore, path: impl AsRef<Path>) -> Result<(), EmbeddingError> {
    store.save(path)
}

fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

/// Divides every row by its L2 norm.
pub fn normalize_rows(store: &EmbeddingStore) -> Result<EmbeddingStore, EmbeddingError> {
    let mut data = Vec::with_capacity(store.data.len());
    for (row, v) in store.rows().enumerate() {
        let norm = l2_norm(v);
        if norm == 0.0 {
            return Err(EmbeddingError::ZeroVector(row));
        }
        data.extend(v.iter().map(|&x| (f64::from(x) / norm) as f32));
    }
    EmbeddingStore::from_parts(store.kind, store.dim, store.ids.clone(), data, !store.is_empty())
}

/// Query-by-gallery score matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n_rows: usize,
    n_cols: usize,
    scores: Vec<f32>,
}

impl SimilarityMatrix {
    pub fn from_rows(rows: Vec<Vec<f32>>) -> Result<Self, EmbeddingError> {
        let n_cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != n_cols) {
            return Err(EmbeddingError::DimMismatch { expected: n_cols, found: bad.len() });
        }
        let scores = rows.concat();
        if let Some(i) = scores.iter().position(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite(i / n_cols.max(1)));
        }
        Ok(Self { n_rows: rows.len(), n_cols, scores })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.scores[row * self.n_cols + col]
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.scores[row * self.n_cols..(row + 1) * self.n_cols]
    }
}

/// Cosine scores between every query row and every gallery row.
pub fn similarity(queries: &EmbeddingStore, gallery: &EmbeddingStore) -> Result<SimilarityMatrix, EmbeddingError> {
    similarity_with(queries, gallery, Execution::default())
}

pub fn similarity_with(
    queries: &EmbeddingStore,
    gallery: &EmbeddingStore,
    exec: Execution,
) -> Result<SimilarityMatrix, EmbeddingError> {
    if queries.dim != gallery.dim {
        return Err(EmbeddingError::DimMismatch { expected: queries.dim, found: gallery.dim });
    }
    let ready = |s: &EmbeddingStore| s.normalized || s.is_empty();
    if !ready(queries) || !ready(gallery) {
        return Err(EmbeddingError::NotNormalized);
    }
    let (n_rows, n_cols) = (queries.len(), gallery.len());
    let mut scores = vec![0f32; n_rows * n_cols];
    if n_cols > 0 {
        exec.for_each_chunk(&mut scores, n_cols, |i, out| {
            let q = queries.row(i);
            for (j, slot) in out.iter_mut().enumerate() {
                *slot = dot(q, gallery.row(j)) as f32;
            }
        });
    }
    Ok(SimilarityMatrix { n_rows, n_cols, scores })
}

/// Rows rescaled to unit length in `f64`, ready for repeated cosine queries.
#[derive(Debug, Clone)]
pub struct UnitRows {
    dim: usize,
    data: Vec<f64>,
}

impl UnitRows {
    pub fn from_store(store: &EmbeddingStore) -> Result<Self, EmbeddingError> {
        Self::from_slices(store.dim, store.rows())
    }

    pub fn from_slices<'a>(dim: usize, rows: impl Iterator<Item = &'a [f32]>) -> Result<Self, EmbeddingError> {
        let mut data = Vec::new();
        for (row, v) in rows.enumerate() {
            if v.len() != dim {
                return Err(EmbeddingError::DimMismatch { expected: dim, found: v.len() });
            }
            let unit = unit_vector(v).ok_or(EmbeddingError::ZeroVector(row))?;
            data.extend(unit);
        }
        Ok(Self { dim, data })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn cosine(&self, i: usize, unit_query: &[f64]) -> f64 {
        self.row(i).iter().zip(unit_query).map(|(a, b)| a * b).sum()
    }

    /// Index of the best-scoring row among `candidates` (in candidate order,
    /// first one wins a tie) together with its score.
    pub fn argmax(&self, unit_query: &[f64], candidates: impl IntoIterator<Item = usize>) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for i in candidates {
            let s = self.cosine(i, unit_query);
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        best
    }
}

/// `v / |v|` computed in `f64`; `None` for a zero vector.
pub fn unit_vector(v: &[f32]) -> Option<Vec<f64>> {
    let norm = l2_norm(v);
    (norm > 0.0).then(|| v.iter().map(|&x| f64::from(x) / norm).collect())
}

/// Gallery rows sorted by canonical id order, so that the first maximum in
/// a scan is the canonically smallest id.
#[derive(Debug, Clone)]
pub struct Gallery<'a> {
    store: &'a EmbeddingStore,
    unit: UnitRows,
    canonical: Vec<usize>,
}

impl<'a> Gallery<'a> {
    pub fn new(store: &'a EmbeddingStore) -> Result<Self, EmbeddingError> {
        let unit = UnitRows::from_store(store)?;
        let mut canonical: Vec<usize> = (0..store.len()).collect();
        canonical.sort_by(|&a, &b| store.ids[a].cmp(&store.ids[b]));
        Ok(Self { store, unit, canonical })
    }

    pub fn store(&self) -> &EmbeddingStore {
        self.store
    }

    /// Best cosine match for `query`, skipping ids in `exclude`.
    pub fn nearest(&self, query: &[f32], exclude: &HashSet<EntryId>) -> Result<(EntryId, f64), EmbeddingError> {
        if query.len() != self.store.dim {
            return Err(EmbeddingError::DimMismatch { expected: self.store.dim, found: query.len() });
        }
        let q = unit_vector(query).ok_or(EmbeddingError::ZeroVector(0))?;
        let candidates = self
            .canonical
            .iter()
            .copied()
            .filter(|&i| exclude.is_empty() || !exclude.contains(&self.store.ids[i]));
        self.unit
            .argmax(&q, candidates)
            .map(|(i, s)| (self.store.ids[i].clone(), s))
            .ok_or(EmbeddingError::EmptyGallery)
    }
}

/// Highest-cosine gallery row not listed in `exclude`; ties go to the
/// canonically smallest id.
pub fn nearest_neighbor(
    query: &[f32],
    gallery: &EmbeddingStore,
    exclude: &HashSet<EntryId>,
) -> Result<(EntryId, f64), EmbeddingError> {
    Gallery::new(gallery)?.nearest(query, exclude)
}
