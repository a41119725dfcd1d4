//! Top-k cosine search over document embeddings.
//!
//! Two backends share one storage layout: [`IndexBackend::Exact`] scans every
//! vector and is the correctness oracle; [`IndexBackend::Ann`] walks an HNSW
//! graph. Both return results ordered by score descending, ties broken by
//! ascending item id.
//!
//! On disk an index is a directory holding `manifest.json`,
//! `vectors.f32le` (row-major little-endian `f32`) and `ids.txt` (one id per
//! line, row-aligned with the vectors). The ANN graph is rebuilt from the
//! vectors on load; construction is seeded, so the graph is identical.

pub mod hnsw;

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{dot, EmbeddingVector};
use crate::ranked::{score_desc_id_asc, ScoredItem};

pub use hnsw::{Hnsw, HnswParams};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const VECTORS_FILE: &str = "vectors.f32le";
pub const IDS_FILE: &str = "ids.txt";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("entry {id:?} has dimension {got}, expected {expected}")]
    MixedDimensions {
        id: String,
        expected: usize,
        got: usize,
    },
    #[error("duplicate item id {0:?}")]
    DuplicateId(String),
    #[error("query has dimension {got}, index has {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("k must be at least 1")]
    InvalidK,
    #[error("item id {0:?} cannot be stored in ids.txt")]
    UnstorableId(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt index: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum IndexBackend {
    #[default]
    Exact,
    Ann(HnswParams),
}

impl IndexBackend {
    pub fn ann() -> Self {
        Self::Ann(HnswParams::default())
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Exact => "exact",
            Self::Ann(_) => "ann",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub item_id: String,
    pub vector: EmbeddingVector,
}

impl IndexEntry {
    pub fn new(item_id: impl Into<String>, vector: EmbeddingVector) -> Self {
        Self {
            item_id: item_id.into(),
            vector,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    dim: usize,
    count: usize,
    backend: IndexBackend,
    vectors_file: String,
    ids_file: String,
}

/// Immutable vector index. Queries take `&self` and may run from any
/// number of threads.
#[derive(Debug, Clone)]
pub struct VectorIndex {
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<f32>,
    backend: IndexBackend,
    graph: Option<Hnsw>,
}

impl VectorIndex {
    pub fn build(entries: Vec<IndexEntry>, backend: IndexBackend) -> Result<Self, IndexError> {
        let dim = entries.first().map(|e| e.vector.dim()).unwrap_or(0);
        let mut ids = Vec::with_capacity(entries.len());
        let mut vectors = Vec::with_capacity(entries.len() * dim);
        let mut seen = HashSet::with_capacity(entries.len());
        for e in entries {
            if e.vector.dim() != dim {
                return Err(IndexError::MixedDimensions {
                    id: e.item_id,
                    expected: dim,
                    got: e.vector.dim(),
                });
            }
            if !seen.insert(e.item_id.clone()) {
                return Err(IndexError::DuplicateId(e.item_id));
            }
            vectors.extend_from_slice(e.vector.as_slice());
            ids.push(e.item_id);
        }
        Ok(Self::from_raw(dim, ids, vectors, backend))
    }

    fn from_raw(dim: usize, ids: Vec<String>, vectors: Vec<f32>, backend: IndexBackend) -> Self {
        let graph = match &backend {
            IndexBackend::Exact => None,
            IndexBackend::Ann(params) => Some(Hnsw::build(&vectors, dim, params.clone())),
        };
        Self {
            dim,
            ids,
            vectors,
            backend,
            graph,
        }
    }

    /// Same vectors, different backend.
    pub fn with_backend(&self, backend: IndexBackend) -> Self {
        Self::from_raw(self.dim, self.ids.clone(), self.vectors.clone(), backend)
    }

    /// Zero for an empty index.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn backend(&self) -> &IndexBackend {
        &self.backend
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vector(&self, row: usize) -> &[f32] {
        &self.vectors[row * self.dim..(row + 1) * self.dim]
    }

    fn cmp_rows(&self, a: (usize, f32), b: (usize, f32)) -> Ordering {
        score_desc_id_asc(a.1, &self.ids[a.0], b.1, &self.ids[b.0])
    }

    /// The `k` stored items most similar to `query`.
    pub fn top_k(&self, query: &[f32], k: usize) -> Result<Vec<ScoredItem>, IndexError> {
        if k == 0 {
            return Err(IndexError::InvalidK);
        }
        if self.is_empty() {
            return Ok(Vec::new());
        }
        if query.len() != self.dim {
            return Err(IndexError::DimensionMismatch {
                expected: self.dim,
                got: query.len(),
            });
        }
        let mut scored: Vec<(usize, f32)> = match &self.graph {
            None => self
                .vectors
                .chunks_exact(self.dim)
                .enumerate()
                .map(|(row, v)| (row, dot(query, v)))
                .collect(),
            Some(graph) => graph
                .search(&self.vectors, query, k)
                .into_iter()
                .map(|(row, s)| (row as usize, s))
                .collect(),
        };
        if scored.len() > k {
            scored.select_nth_unstable_by(k - 1, |&a, &b| self.cmp_rows(a, b));
            scored.truncate(k);
        }
        scored.sort_by(|&a, &b| self.cmp_rows(a, b));
        Ok(scored
            .into_iter()
            .map(|(row, s)| ScoredItem::new(self.ids[row].clone(), s))
            .collect())
    }

    pub fn top_k_vector(
        &self,
        query: &EmbeddingVector,
        k: usize,
    ) -> Result<Vec<ScoredItem>, IndexError> {
        self.top_k(query.as_slice(), k)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), IndexError> {
        let dir = dir.as_ref();
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| IndexError::Io { path, source }
        };
        if let Some(bad) = self
            .ids
            .iter()
            .find(|id| id.contains('\n') || id.contains('\r'))
        {
            return Err(IndexError::UnstorableId(bad.clone()));
        }
        fs::create_dir_all(dir).map_err(io(dir))?;

        let vpath = dir.join(VECTORS_FILE);
        let mut w = BufWriter::new(fs::File::create(&vpath).map_err(io(&vpath))?);
        for v in &self.vectors {
            w.write_all(&v.to_le_bytes()).map_err(io(&vpath))?;
        }
        w.flush().map_err(io(&vpath))?;

        let ipath = dir.join(IDS_FILE);
        let mut w = BufWriter::new(fs::File::create(&ipath).map_err(io(&ipath))?);
        for id in &self.ids {
            writeln!(w, "{id}").map_err(io(&ipath))?;
        }
        w.flush().map_err(io(&ipath))?;

        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            dim: self.dim,
            count: self.ids.len(),
            backend: self.backend.clone(),
            vectors_file: VECTORS_FILE.into(),
            ids_file: IDS_FILE.into(),
        };
        let mpath = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| IndexError::Corrupt(e.to_string()))?;
        fs::write(&mpath, json + "\n").map_err(io(&mpath))?;
        Ok(())
    }

    /// Loads an index directory, using the backend recorded in its manifest.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self, IndexError> {
        let dir = dir.as_ref();
        let read = |name: &str| {
            let path = dir.join(name);
            fs::read(&path).map_err(|source| IndexError::Io { path, source })
        };
        let manifest: Manifest = serde_json::from_slice(&read(MANIFEST_FILE)?)
            .map_err(|e| IndexError::Corrupt(format!("manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(IndexError::Corrupt(format!(
                "unsupported format version {}",
                manifest.format_version
            )));
        }
        let bytes = read(&manifest.vectors_file)?;
        if bytes.len() != manifest.count * manifest.dim * 4 {
            return Err(IndexError::Corrupt(format!(
                "{} holds {} bytes, expected {}",
                manifest.vectors_file,
                bytes.len(),
                manifest.count * manifest.dim * 4
            )));
        }
        let vectors: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(IndexError::Corrupt("non-finite vector component".into()));
        }
        let ids_text = String::from_utf8(read(&manifest.ids_file)?)
            .map_err(|e| IndexError::Corrupt(format!("ids: {e}")))?;
        let ids: Vec<String> = ids_text.lines().map(str::to_string).collect();
        if ids.len() != manifest.count {
            return Err(IndexError::Corrupt(format!(
                "{} ids for {} vectors",
                ids.len(),
                manifest.count
            )));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(IndexError::DuplicateId(dup.clone()));
        }
        Ok(Self::from_raw(manifest.dim, ids, vectors, manifest.backend))
    }
}
