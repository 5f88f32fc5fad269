use std::collections::{BTreeSet, HashMap};
use std::fmt;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bindnet::{Stage, TrainBatch};
use crate::curate::Quintuple;
use crate::error::{Error, Result};
use crate::store::EmbeddingStore;
use crate::types::{ItemId, Modality};

/// Human-verified caption/candidate pair with its target probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub caption_id: ItemId,
    pub candidate_id: ItemId,
    pub modality: Modality,
    pub p: f64,
}

impl LabeledPair {
    pub fn validate(&self) -> Result<()> {
        if ![0.0, 0.5, 1.0].contains(&self.p) {
            return Err(Error::InvalidArgument(format!(
                "target {} for {} is not one of 0, 0.5, 1",
                self.p, self.candidate_id
            )));
        }
        if !self.modality.is_projected() {
            return Err(Error::InvalidArgument(format!("{} is not a projected modality", self.modality)));
        }
        Ok(())
    }
}

/// An item that came with its own caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionedPair {
    pub caption_id: ItemId,
    pub item_id: ItemId,
    pub modality: Modality,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Splits {
    pub s1: Vec<Quintuple>,
    pub s2: Vec<LabeledPair>,
    pub s3: Vec<CaptionedPair>,
}

impl Splits {
    pub fn is_empty(&self, stage: Stage) -> bool {
        match stage {
            Stage::S1 => self.s1.is_empty(),
            Stage::S2 => self.s2.is_empty(),
            Stage::S3 => self.s3.is_empty(),
        }
    }
}

/// Which projector, against which frozen modalities, on which split.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TaskKey {
    pub projected: Modality,
    pub frozen: BTreeSet<Modality>,
    pub split: Stage,
}

impl TaskKey {
    pub fn new(projected: Modality, frozen: impl IntoIterator<Item = Modality>, split: Stage) -> Result<Self> {
        let frozen: BTreeSet<_> = frozen.into_iter().collect();
        if !projected.is_projected() {
            return Err(Error::InvalidArgument(format!("{projected} is not a projected modality")));
        }
        if frozen.is_empty() || frozen.iter().any(|m| !m.is_frozen()) {
            return Err(Error::InvalidArgument(format!(
                "frozen set for {projected} must be a non-empty subset of text/image/video"
            )));
        }
        if split != Stage::S1 && frozen != BTreeSet::from([Modality::Text]) {
            return Err(Error::InvalidArgument(format!("{split} tasks pair with text only")));
        }
        Ok(Self { projected, frozen, split })
    }

    /// Stable id used to derive per-task shuffle streams.
    fn stream_id(&self) -> u64 {
        let mask: u64 = self.frozen.iter().map(|m| 1u64 << m.code()).sum();
        (self.split.code() as u64) << 16 | (self.projected.code() as u64) << 8 | mask
    }
}

impl fmt::Display for TaskKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let frozen: Vec<_> = self.frozen.iter().map(|m| m.as_str()).collect();
        write!(f, "{}:{}<-{}", self.split, self.projected, frozen.join("+"))
    }
}

/// Embedding stores by modality with id lookup.
#[derive(Debug, Default)]
pub struct EmbeddingBank {
    stores: HashMap<Modality, (EmbeddingStore, HashMap<ItemId, usize>)>,
}

impl EmbeddingBank {
    pub fn new() -> Self {
        Self::default()
    }

    /// Frozen stores must be normalized; projected stores hold raw encoder outputs.
    pub fn insert(&mut self, store: EmbeddingStore) -> Result<()> {
        if store.modality().is_frozen() && !store.is_normalized() {
            return Err(Error::NotNormalized);
        }
        let idx = store.id_index();
        self.stores.insert(store.modality(), (store, idx));
        Ok(())
    }

    pub fn store(&self, m: Modality) -> Option<&EmbeddingStore> {
        self.stores.get(&m).map(|(s, _)| s)
    }

    pub fn dim(&self, m: Modality) -> Option<usize> {
        self.store(m).map(EmbeddingStore::dim)
    }

    pub fn get(&self, m: Modality, id: &ItemId) -> Result<&[f32]> {
        let (store, idx) = self
            .stores
            .get(&m)
            .ok_or_else(|| Error::MissingEmbedding(id.clone(), m))?;
        idx.get(id)
            .map(|&r| store.row(r))
            .ok_or_else(|| Error::MissingEmbedding(id.clone(), m))
    }
}

/// Resolved rows for one task, ready to be cut into batches.
#[derive(Debug, Clone)]
pub struct TaskRows {
    pub key: TaskKey,
    pub a_in: Array2<f64>,
    pub frozen: Vec<(Modality, Array2<f64>)>,
    pub p: Vec<f64>,
}

impl TaskRows {
    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }
}

fn gather(bank: &EmbeddingBank, m: Modality, ids: &[&ItemId]) -> Result<Array2<f64>> {
    let dim = bank.dim(m).unwrap_or(0);
    let mut out = Array2::zeros((ids.len(), dim));
    for (mut row, id) in out.rows_mut().into_iter().zip(ids) {
        for (dst, &src) in row.iter_mut().zip(bank.get(m, id)?) {
            *dst = src as f64;
        }
    }
    if ids.is_empty() && bank.store(m).is_none() {
        return Ok(Array2::zeros((0, 0)));
    }
    Ok(out)
}

/// Looks up every embedding a task needs.
pub fn resolve_rows(splits: &Splits, key: &TaskKey, bank: &EmbeddingBank) -> Result<TaskRows> {
    let mut members: Vec<(&ItemId, Vec<&ItemId>, f64)> = Vec::new();
    match key.split {
        Stage::S1 => {
            for q in &splits.s1 {
                let frozen = key.frozen.iter().map(|&m| q.member(m)).collect();
                members.push((q.member(key.projected), frozen, 1.0));
            }
        }
        Stage::S2 => {
            for lp in splits.s2.iter().filter(|lp| lp.modality == key.projected) {
                lp.validate()?;
                members.push((&lp.candidate_id, vec![&lp.caption_id], lp.p));
            }
        }
        Stage::S3 => {
            for cp in splits.s3.iter().filter(|cp| cp.modality == key.projected) {
                members.push((&cp.item_id, vec![&cp.caption_id], 1.0));
            }
        }
    }
    let a_ids: Vec<_> = members.iter().map(|(a, _, _)| *a).collect();
    let a_in = gather(bank, key.projected, &a_ids)?;
    let mut frozen = Vec::with_capacity(key.frozen.len());
    for (j, &m) in key.frozen.iter().enumerate() {
        let ids: Vec<_> = members.iter().map(|(_, f, _)| f[j]).collect();
        frozen.push((m, gather(bank, m, &ids)?));
    }
    Ok(TaskRows {
        key: key.clone(),
        a_in,
        frozen,
        p: members.iter().map(|(_, _, p)| *p).collect(),
    })
}

/// Number of batches one epoch yields: full batches plus a trailing one of at least 2 rows.
pub fn batches_per_epoch(records: usize, batch_size: usize) -> usize {
    let full = records / batch_size;
    if records % batch_size >= 2 {
        full + 1
    } else {
        full
    }
}

/// Epoch-by-epoch seeded shuffles of a task's rows.
#[derive(Debug, Clone)]
pub struct BatchStream {
    rows: TaskRows,
    batch_size: usize,
    epochs: usize,
    seed: u64,
    epoch: usize,
    order: Vec<usize>,
    pos: usize,
}

impl BatchStream {
    pub fn new(rows: TaskRows, batch_size: usize, epochs: usize, seed: u64) -> Result<Self> {
        if batch_size < 2 {
            return Err(Error::InvalidArgument(format!("batch size {batch_size} below 2")));
        }
        let mut s = Self {
            rows,
            batch_size,
            epochs,
            seed,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        };
        s.shuffle();
        Ok(s)
    }

    pub fn key(&self) -> &TaskKey {
        &self.rows.key
    }

    /// Total batches over all epochs.
    pub fn total(&self) -> usize {
        self.epochs * batches_per_epoch(self.rows.len(), self.batch_size)
    }

    fn shuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.rows.key.stream_id() << 16 | self.epoch as u64);
        self.order = (0..self.rows.len()).collect();
        self.order.shuffle(&mut rng);
        self.pos = 0;
    }
}

impl Iterator for BatchStream {
    type Item = TrainBatch;

    fn next(&mut self) -> Option<TrainBatch> {
        loop {
            if self.epoch >= self.epochs {
                return None;
            }
            let remaining = self.order.len() - self.pos;
            if remaining >= 2 {
                let take = remaining.min(self.batch_size);
                let idx = &self.order[self.pos..self.pos + take];
                self.pos += take;
                let r = &self.rows;
                return Some(TrainBatch {
                    projected: r.key.projected,
                    a_in: r.a_in.select(ndarray::Axis(0), idx),
                    frozen: r
                        .frozen
                        .iter()
                        .map(|(m, block)| (*m, block.select(ndarray::Axis(0), idx)))
                        .collect(),
                    p: idx.iter().map(|&i| r.p[i]).collect(),
                });
            }
            self.epoch += 1;
            if self.epoch < self.epochs {
                self.shuffle();
            }
        }
    }
}

/// All batches for a task over `epochs` epochs.
pub fn assemble_batches(
    splits: &Splits,
    key: &TaskKey,
    bank: &EmbeddingBank,
    batch_size: usize,
    epochs: usize,
    seed: u64,
) -> Result<BatchStream> {
    BatchStream::new(resolve_rows(splits, key, bank)?, batch_size, epochs, seed)
}
