//! Hierarchical navigable small-world graph.
//!
//! Nodes get a random top layer drawn from an exponential distribution with
//! scale `1/ln(M)`. Each insertion descends greedily from the global entry
//! point, then runs a beam of width `ef_construction` on every layer at or
//! below its own, linking to the nearest candidates up to the layer's degree
//! cap: `M` on upper layers, `2M` on layer 0 (as FAISS does for `HNSW32`).
//! Overfull neighbour lists are pruned by keeping the nearest.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::store::{write_matrix, EmbeddingStore};

use super::{dot, rank_order};

const MAX_LEVEL: usize = 16;
const BLOB_MAGIC: [u8; 4] = *b"EBHN";
const BLOB_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HnswConfig {
    /// Max out-degree per upper layer; layer 0 allows `2 * m`.
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    pub seed: u64,
}

impl Default for HnswConfig {
    fn default() -> Self {
        Self {
            m: 32,
            ef_construction: 200,
            ef_search: 64,
            seed: 0,
        }
    }
}

impl HnswConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 2 || self.ef_construction == 0 || self.ef_search == 0 {
            return Err(Error::InvalidArgument(format!(
                "hnsw config needs m >= 2 and positive ef values, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Scored {
    score: f64,
    node: u32,
}

impl Eq for Scored {}

impl Ord for Scored {
    /// Greater means better: higher score, then lower node id.
    fn cmp(&self, other: &Self) -> Ordering {
        rank_order((other.score, other.node as usize), (self.score, self.node as usize))
    }
}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Generation-stamped visited set, reusable across searches.
struct Visited {
    marks: Vec<u32>,
    generation: u32,
}

impl Visited {
    fn new(n: usize) -> Self {
        Self {
            marks: vec![0; n],
            generation: 0,
        }
    }

    fn reset(&mut self) {
        self.generation = self.generation.wrapping_add(1);
        if self.generation == 0 {
            self.marks.iter_mut().for_each(|m| *m = 0);
            self.generation = 1;
        }
    }

    /// Returns true if `node` was not yet visited.
    fn insert(&mut self, node: u32) -> bool {
        let slot = &mut self.marks[node as usize];
        if *slot == self.generation {
            false
        } else {
            *slot = self.generation;
            true
        }
    }
}

#[derive(Debug, Clone)]
pub struct HnswIndex {
    store: EmbeddingStore,
    cfg: HnswConfig,
    /// links[node][layer] = neighbour ids
    links: Vec<Vec<Vec<u32>>>,
    entry: Option<u32>,
    top_layer: usize,
}

impl HnswIndex {
    pub fn build(store: EmbeddingStore, cfg: HnswConfig) -> Result<Self> {
        cfg.validate()?;
        if !store.is_normalized() {
            return Err(Error::NotNormalized);
        }
        if store.count() > u32::MAX as usize {
            return Err(Error::InvalidArgument("hnsw supports at most 2^32-1 items".into()));
        }
        let n = store.count();
        let mut index = Self {
            store,
            cfg,
            links: Vec::with_capacity(n),
            entry: None,
            top_layer: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let level_scale = 1.0 / (cfg.m as f64).ln();
        let mut visited = Visited::new(n);
        for node in 0..n as u32 {
            // 1 - u lies in (0, 1], so the log is finite.
            let u: f64 = rng.random();
            let level = ((-(1.0 - u).ln() * level_scale).floor() as usize).min(MAX_LEVEL);
            index.insert(node, level, &mut visited);
        }
        Ok(index)
    }

    pub fn store(&self) -> &EmbeddingStore {
        &self.store
    }

    pub fn config(&self) -> &HnswConfig {
        &self.cfg
    }

    fn max_links(&self, layer: usize) -> usize {
        if layer == 0 {
            2 * self.cfg.m
        } else {
            self.cfg.m
        }
    }

    fn insert(&mut self, node: u32, level: usize, visited: &mut Visited) {
        self.links.push(vec![Vec::new(); level + 1]);
        let Some(entry) = self.entry else {
            self.entry = Some(node);
            self.top_layer = level;
            return;
        };
        let query = self.store.row(node as usize).to_vec();
        let mut ep = Scored {
            score: dot(&query, self.store.row(entry as usize)),
            node: entry,
        };
        for layer in (level + 1..=self.top_layer).rev() {
            ep = self.greedy(&query, ep, layer);
        }
        let mut entry_points = vec![ep];
        for layer in (0..=level.min(self.top_layer)).rev() {
            let found = self.search_layer(
                &query,
                &entry_points,
                self.cfg.ef_construction,
                layer,
                visited,
            );
            let neighbours: Vec<u32> = found
                .iter()
                .take(self.max_links(layer))
                .map(|s| s.node)
                .collect();
            self.links[node as usize][layer] = neighbours.clone();
            for &nb in &neighbours {
                self.links[nb as usize][layer].push(node);
                if self.links[nb as usize][layer].len() > self.max_links(layer) {
                    self.shrink(nb, layer);
                }
            }
            entry_points = found;
        }
        if level > self.top_layer {
            self.top_layer = level;
            self.entry = Some(node);
        }
    }

    /// Keeps the nearest `max_links(layer)` neighbours of `node`.
    fn shrink(&mut self, node: u32, layer: usize) {
        let base = self.store.row(node as usize);
        let mut scored: Vec<Scored> = self.links[node as usize][layer]
            .iter()
            .map(|&nb| Scored {
                score: dot(base, self.store.row(nb as usize)),
                node: nb,
            })
            .collect();
        scored.sort_by(|a, b| b.cmp(a));
        scored.truncate(self.max_links(layer));
        self.links[node as usize][layer] = scored.into_iter().map(|s| s.node).collect();
    }

    fn greedy(&self, query: &[f32], mut best: Scored, layer: usize) -> Scored {
        loop {
            let mut improved = false;
            for &nb in &self.links[best.node as usize][layer] {
                let cand = Scored {
                    score: dot(query, self.store.row(nb as usize)),
                    node: nb,
                };
                if cand > best {
                    best = cand;
                    improved = true;
                }
            }
            if !improved {
                return best;
            }
        }
    }

    /// Beam search on one layer; returns up to `ef` nodes, best first.
    fn search_layer(
        &self,
        query: &[f32],
        entry_points: &[Scored],
        ef: usize,
        layer: usize,
        visited: &mut Visited,
    ) -> Vec<Scored> {
        visited.reset();
        let mut candidates: BinaryHeap<Scored> = BinaryHeap::new();
        let mut results: BinaryHeap<Reverse<Scored>> = BinaryHeap::new();
        for &ep in entry_points {
            if visited.insert(ep.node) {
                candidates.push(ep);
                results.push(Reverse(ep));
                if results.len() > ef {
                    results.pop();
                }
            }
        }
        while let Some(current) = candidates.pop() {
            let worst = results.peek().map(|r| r.0);
            if let Some(worst) = worst {
                if results.len() >= ef && current < worst {
                    break;
                }
            }
            for &nb in &self.links[current.node as usize][layer] {
                if !visited.insert(nb) {
                    continue;
                }
                let cand = Scored {
                    score: dot(query, self.store.row(nb as usize)),
                    node: nb,
                };
                let admit = results.len() < ef || results.peek().is_some_and(|w| cand > w.0);
                if admit {
                    candidates.push(cand);
                    results.push(Reverse(cand));
                    if results.len() > ef {
                        results.pop();
                    }
                }
            }
        }
        let mut out: Vec<Scored> = results.into_iter().map(|r| r.0).collect();
        out.sort_by(|a, b| b.cmp(a));
        out
    }

    pub(crate) fn search_rows(&self, query: &[f32], k: usize) -> Vec<(f64, usize)> {
        let Some(entry) = self.entry else {
            return Vec::new();
        };
        if k == 0 {
            return Vec::new();
        }
        let ef = self.cfg.ef_search.max(k);
        let mut ep = Scored {
            score: dot(query, self.store.row(entry as usize)),
            node: entry,
        };
        for layer in (1..=self.top_layer).rev() {
            ep = self.greedy(query, ep, layer);
        }
        let mut visited = Visited::new(self.store.count());
        self.search_layer(query, &[ep], ef, 0, &mut visited)
            .into_iter()
            .take(k)
            .map(|s| (s.score, s.node as usize))
            .collect()
    }

    /// Total number of directed edges, for diagnostics.
    pub fn edge_count(&self) -> usize {
        self.links.iter().flatten().map(Vec::len).sum()
    }

    fn max_degree_ok(&self) -> bool {
        self.links.iter().all(|layers| {
            layers
                .iter()
                .enumerate()
                .all(|(l, nbs)| nbs.len() <= self.max_links(l))
        })
    }
}

fn store_checksum(store: &EmbeddingStore) -> Result<[u8; 32]> {
    let mut bytes = Vec::new();
    write_matrix(store, &mut bytes)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    for id in store.ids() {
        hasher.update(id.to_string().as_bytes());
        hasher.update([0u8]);
    }
    Ok(hasher.finalize().into())
}

/// Writes the graph together with its config and a checksum of the indexed store.
pub fn save_hnsw(index: &HnswIndex, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&BLOB_MAGIC)?;
    w.write_all(&BLOB_VERSION.to_le_bytes())?;
    for v in [index.cfg.m, index.cfg.ef_construction, index.cfg.ef_search] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    w.write_all(&index.cfg.seed.to_le_bytes())?;
    w.write_all(&store_checksum(&index.store)?)?;
    w.write_all(&(index.links.len() as u64).to_le_bytes())?;
    w.write_all(&index.entry.unwrap_or(u32::MAX).to_le_bytes())?;
    w.write_all(&(index.top_layer as u32).to_le_bytes())?;
    for layers in &index.links {
        w.write_all(&[layers.len() as u8])?;
        for nbs in layers {
            w.write_all(&(nbs.len() as u32).to_le_bytes())?;
            for nb in nbs {
                w.write_all(&nb.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated index blob".into()),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

/// Loads a graph saved by [`save_hnsw`]; `store` must be the store it was built on.
pub fn load_hnsw(path: impl AsRef<Path>, store: EmbeddingStore) -> Result<HnswIndex> {
    let mut r = BufReader::new(File::open(path)?);
    if read_array::<4>(&mut r)? != BLOB_MAGIC {
        return Err(Error::Format("bad index magic".into()));
    }
    let version = u16::from_le_bytes(read_array(&mut r)?);
    if version != BLOB_VERSION {
        return Err(Error::Format(format!("unsupported index version {version}")));
    }
    let m = u64::from_le_bytes(read_array(&mut r)?) as usize;
    let ef_construction = u64::from_le_bytes(read_array(&mut r)?) as usize;
    let ef_search = u64::from_le_bytes(read_array(&mut r)?) as usize;
    let seed = u64::from_le_bytes(read_array(&mut r)?);
    let cfg = HnswConfig {
        m,
        ef_construction,
        ef_search,
        seed,
    };
    cfg.validate()?;
    let checksum: [u8; 32] = read_array(&mut r)?;
    if !store.is_normalized() {
        return Err(Error::NotNormalized);
    }
    if checksum != store_checksum(&store)? {
        return Err(Error::Format("index checksum does not match the store".into()));
    }
    let n = u64::from_le_bytes(read_array(&mut r)?) as usize;
    if n != store.count() {
        return Err(Error::Format("index node count differs from store".into()));
    }
    let entry = u32::from_le_bytes(read_array(&mut r)?);
    let top_layer = u32::from_le_bytes(read_array(&mut r)?) as usize;
    let mut links = Vec::with_capacity(n);
    for _ in 0..n {
        let layers = read_array::<1>(&mut r)?[0] as usize;
        let mut node_links = Vec::with_capacity(layers);
        for _ in 0..layers {
            let len = u32::from_le_bytes(read_array(&mut r)?) as usize;
            let mut nbs = Vec::with_capacity(len.min(1024));
            for _ in 0..len {
                let nb = u32::from_le_bytes(read_array(&mut r)?);
                if nb as usize >= n {
                    return Err(Error::Format("neighbour id out of range".into()));
                }
                nbs.push(nb);
            }
            node_links.push(nbs);
        }
        links.push(node_links);
    }
    let index = HnswIndex {
        store,
        cfg,
        links,
        entry: (entry != u32::MAX).then_some(entry),
        top_layer,
    };
    if !index.max_degree_ok() {
        return Err(Error::Format("neighbour list exceeds degree cap".into()));
    }
    Ok(index)
}
