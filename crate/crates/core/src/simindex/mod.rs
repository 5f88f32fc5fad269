//! Cosine-similarity indices over normalized stores.
//!
//! Similarity is the plain dot product; both index kinds refuse stores that
//! are not flagged normalized. Results are ordered by score descending with
//! ties broken by ascending row.

mod exact;
mod hnsw;

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::EmbeddingStore;
use crate::types::ItemId;

pub use exact::ExactIndex;
pub use hnsw::{load_hnsw, save_hnsw, HnswConfig, HnswIndex};

#[derive(Debug, Clone, PartialEq)]
pub struct SearchHit {
    pub row: usize,
    pub id: ItemId,
    pub score: f32,
}

/// Dot product accumulated in f64.
#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Orders (score, row) pairs best-first: higher score, then lower row.
#[inline]
pub(crate) fn rank_order(a: (f64, usize), b: (f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Which index to build; used by callers that pick at runtime.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum IndexKind {
    #[default]
    Exact,
    Hnsw(HnswConfig),
}

/// Either index kind behind one search interface.
#[derive(Debug, Clone)]
pub enum Index {
    Exact(ExactIndex),
    Hnsw(HnswIndex),
}

pub fn build_exact(store: EmbeddingStore) -> Result<Index> {
    ExactIndex::new(store).map(Index::Exact)
}

pub fn build_hnsw(store: EmbeddingStore, cfg: HnswConfig) -> Result<Index> {
    HnswIndex::build(store, cfg).map(Index::Hnsw)
}

pub fn build_index(store: EmbeddingStore, kind: IndexKind) -> Result<Index> {
    match kind {
        IndexKind::Exact => build_exact(store),
        IndexKind::Hnsw(cfg) => build_hnsw(store, cfg),
    }
}

impl Index {
    pub fn store(&self) -> &EmbeddingStore {
        match self {
            Index::Exact(ix) => ix.store(),
            Index::Hnsw(ix) => ix.store(),
        }
    }

    /// Top-`k` hits for one query vector.
    pub fn search_one(&self, query: &[f32], k: usize) -> Result<Vec<SearchHit>> {
        let dim = self.store().dim();
        if query.len() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                got: query.len(),
            });
        }
        let ranked = match self {
            Index::Exact(ix) => ix.search_rows(query, k),
            Index::Hnsw(ix) => ix.search_rows(query, k),
        };
        let items = self.store().items();
        Ok(ranked
            .into_iter()
            .map(|(score, row)| SearchHit {
                row,
                id: items[row].id.clone(),
                score: score as f32,
            })
            .collect())
    }

    /// Top-`k` hits for every row of `queries`, in query order.
    pub fn search(&self, queries: &EmbeddingStore, k: usize) -> Result<Vec<Vec<SearchHit>>> {
        if !queries.is_normalized() {
            return Err(Error::NotNormalized);
        }
        if queries.dim() != self.store().dim() {
            return Err(Error::DimMismatch {
                expected: self.store().dim(),
                got: queries.dim(),
            });
        }
        (0..queries.count())
            .into_par_iter()
            .map(|i| self.search_one(queries.row(i), k))
            .collect()
    }
}
