//! Training-pair curation: caption dedup, leakage filtering, nearest-neighbour
//! quintuples and similarity-prioritized greedy matching.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};
use crate::simindex::{build_index, IndexKind};
use crate::store::EmbeddingStore;
use crate::types::{ItemId, ItemRecord, MatchConfig, Modality};

/// Caption plus its nearest neighbour in each of the four other modalities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quintuple {
    pub caption: ItemId,
    pub image: ItemId,
    pub video: ItemId,
    pub audio: ItemId,
    pub points: ItemId,
    pub score_image: f32,
    pub score_video: f32,
    pub score_audio: f32,
    pub score_points: f32,
}

impl Quintuple {
    pub fn member(&self, modality: Modality) -> &ItemId {
        match modality {
            Modality::Text => &self.caption,
            Modality::Image => &self.image,
            Modality::Video => &self.video,
            Modality::Audio => &self.audio,
            Modality::Points => &self.points,
        }
    }

    pub fn member_mut(&mut self, modality: Modality) -> &mut ItemId {
        match modality {
            Modality::Text => &mut self.caption,
            Modality::Image => &mut self.image,
            Modality::Video => &mut self.video,
            Modality::Audio => &mut self.audio,
            Modality::Points => &mut self.points,
        }
    }

    /// Retrieval score of a non-text slot; text has no score.
    pub fn score(&self, modality: Modality) -> Option<f32> {
        match modality {
            Modality::Text => None,
            Modality::Image => Some(self.score_image),
            Modality::Video => Some(self.score_video),
            Modality::Audio => Some(self.score_audio),
            Modality::Points => Some(self.score_points),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePair {
    pub caption: ItemId,
    pub candidate: ItemId,
    pub score: f32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchResult {
    /// Accepted pairs in acceptance order.
    pub pairs: Vec<CandidatePair>,
    pub per_text_count: BTreeMap<ItemId, usize>,
    pub per_candidate_count: BTreeMap<ItemId, usize>,
}

/// A caption with the candidates to show an annotator, in display order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateGroup {
    pub caption: ItemId,
    pub candidates: Vec<CandidatePair>,
}

/// Pools of the four non-text modalities, each comparable with the captions.
#[derive(Debug, Clone, Copy)]
pub struct QuintuplePools<'a> {
    pub image: &'a EmbeddingStore,
    pub video: &'a EmbeddingStore,
    pub audio: &'a EmbeddingStore,
    pub points: &'a EmbeddingStore,
}

fn dedup_key(text: &str) -> String {
    let nfc: String = text.nfc().collect();
    nfc.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Keeps the first record of every caption after NFC, whitespace collapse and
/// lowercasing. Records without a caption are kept as-is.
pub fn dedup_captions(captions: Vec<ItemRecord>) -> Vec<ItemRecord> {
    let mut seen = HashSet::new();
    captions
        .into_iter()
        .filter(|r| match &r.caption {
            Some(text) => seen.insert(dedup_key(text)),
            None => true,
        })
        .collect()
}

/// Drops denylisted rows and every row that belongs to the eval split.
pub fn apply_exclusions(pool: &EmbeddingStore, denylist: &HashSet<ItemId>) -> EmbeddingStore {
    pool.retain_rows(|r| !r.is_eval() && !denylist.contains(&r.id))
}

fn train_pool(pool: &EmbeddingStore, expected: Modality) -> Result<EmbeddingStore> {
    if pool.modality() != expected {
        return Err(Error::InvalidArgument(format!(
            "expected a {expected} pool, got {}",
            pool.modality()
        )));
    }
    let pool = apply_exclusions(pool, &HashSet::new());
    if pool.is_empty() {
        return Err(Error::EmptyPool(expected));
    }
    Ok(pool)
}

/// One quintuple per train-split caption, each slot filled by the caption's
/// top-1 hit in that modality's pool.
pub fn build_quintuples(
    captions: &EmbeddingStore,
    pools: QuintuplePools<'_>,
    index: IndexKind,
) -> Result<Vec<Quintuple>> {
    let captions = apply_exclusions(captions, &HashSet::new());
    let mut best: Vec<Vec<(ItemId, f32)>> = Vec::with_capacity(4);
    for (modality, pool) in [
        (Modality::Image, pools.image),
        (Modality::Video, pools.video),
        (Modality::Audio, pools.audio),
        (Modality::Points, pools.points),
    ] {
        let ix = build_index(train_pool(pool, modality)?, index)?;
        let hits = ix.search(&captions, 1)?;
        best.push(
            hits.into_iter()
                .map(|h| {
                    let top = &h[0];
                    (top.id.clone(), top.score)
                })
                .collect(),
        );
    }
    Ok(captions
        .ids()
        .enumerate()
        .map(|(i, caption)| Quintuple {
            caption: caption.clone(),
            image: best[0][i].0.clone(),
            video: best[1][i].0.clone(),
            audio: best[2][i].0.clone(),
            points: best[3][i].0.clone(),
            score_image: best[0][i].1,
            score_video: best[1][i].1,
            score_audio: best[2][i].1,
            score_points: best[3][i].1,
        })
        .collect())
}

/// Top-`k` pool candidates for every train-split caption.
pub fn candidate_pairs(
    captions: &EmbeddingStore,
    pool: &EmbeddingStore,
    k: usize,
    index: IndexKind,
) -> Result<Vec<CandidatePair>> {
    let captions = apply_exclusions(captions, &HashSet::new());
    let ix = build_index(train_pool(pool, pool.modality())?, index)?;
    let hits = ix.search(&captions, k)?;
    Ok(captions
        .ids()
        .zip(hits)
        .flat_map(|(caption, hits)| {
            hits.into_iter().map(move |h| CandidatePair {
                caption: caption.clone(),
                candidate: h.id,
                score: h.score,
            })
        })
        .collect())
}

fn match_order(a: &CandidatePair, b: &CandidatePair) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.caption.cmp(&b.caption))
        .then_with(|| a.candidate.cmp(&b.candidate))
}

/// Similarity-prioritized greedy matching.
///
/// Candidates are visited once in descending score order (ties: caption id,
/// then candidate id); a pair is kept while its caption has fewer than `n`
/// and its candidate fewer than `m_cap` accepted pairs. Non-finite scores are
/// skipped.
pub fn greedy_match(candidates: &[CandidatePair], cfg: &MatchConfig) -> MatchResult {
    let mut sorted: Vec<&CandidatePair> =
        candidates.iter().filter(|c| c.score.is_finite()).collect();
    sorted.sort_by(|a, b| match_order(a, b));
    let mut result = MatchResult::default();
    for pair in sorted {
        let text_seen = result.per_text_count.get(&pair.caption).copied().unwrap_or(0);
        if text_seen >= cfg.n {
            continue;
        }
        let cand_seen = result
            .per_candidate_count
            .get(&pair.candidate)
            .copied()
            .unwrap_or(0);
        if cand_seen >= cfg.m_cap {
            continue;
        }
        *result.per_text_count.entry(pair.caption.clone()).or_default() += 1;
        *result
            .per_candidate_count
            .entry(pair.candidate.clone())
            .or_default() += 1;
        result.pairs.push(pair.clone());
    }
    result
}

/// Keeps the `per_caption` best accepted candidates of each caption, drops
/// captions with fewer, and shuffles each group's display order with `seed`.
pub fn select_diverse(matched: &MatchResult, per_caption: usize, seed: u64) -> Vec<CandidateGroup> {
    let mut groups: BTreeMap<&ItemId, Vec<&CandidatePair>> = BTreeMap::new();
    for pair in &matched.pairs {
        groups.entry(&pair.caption).or_default().push(pair);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    groups
        .into_iter()
        .filter(|(_, pairs)| per_caption > 0 && pairs.len() >= per_caption)
        .map(|(caption, mut pairs)| {
            pairs.sort_by(|a, b| match_order(a, b));
            let mut chosen: Vec<CandidatePair> =
                pairs.into_iter().take(per_caption).cloned().collect();
            chosen.shuffle(&mut rng);
            CandidateGroup {
                caption: caption.clone(),
                candidates: chosen,
            }
        })
        .collect()
}
