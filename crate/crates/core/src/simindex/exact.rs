use crate::error::{Error, Result};
use crate::store::EmbeddingStore;

use super::{dot, rank_order};

/// Brute-force index: scores every stored row.
#[derive(Debug, Clone)]
pub struct ExactIndex {
    store: EmbeddingStore,
}

impl ExactIndex {
    pub fn new(store: EmbeddingStore) -> Result<Self> {
        if !store.is_normalized() {
            return Err(Error::NotNormalized);
        }
        Ok(Self { store })
    }

    pub fn store(&self) -> &EmbeddingStore {
        &self.store
    }

    pub(crate) fn search_rows(&self, query: &[f32], k: usize) -> Vec<(f64, usize)> {
        let mut scored: Vec<(f64, usize)> = self
            .store
            .rows()
            .enumerate()
            .map(|(i, row)| (dot(query, row), i))
            .collect();
        let k = k.min(scored.len());
        if k == 0 {
            return Vec::new();
        }
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, |a, b| rank_order(*a, *b));
            scored.truncate(k);
        }
        scored.sort_by(|a, b| rank_order(*a, *b));
        scored
    }
}
