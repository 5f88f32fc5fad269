//! Synthetic multimodal worlds with known ground truth.
//!
//! Every item has a latent `z = concept + sigma * g` (g standard normal) and
//! its embedding in modality `m` is `normalize(Q_m z)`. Text, image and video
//! share one orthogonal `Q`; audio and points each get their own. Audio and
//! points items also get a retrieval view `normalize(Q_text z)`, which is what
//! a bi-modal text-audio (text-points) model would see when pairing.
//!
//! Besides `items_per_modality` independent training items per modality, the
//! world holds `heldout` evaluation instances, `heldout/<i>`, whose latent is
//! shared across all five modalities so item-level retrieval has an answer.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::curate::Quintuple;
use crate::error::{Error, Result};
use crate::jsonl::write_jsonl;
use crate::store::{save_store, EmbeddingStore};
use crate::train::LabeledPair;
use crate::types::{ItemId, ItemRecord, Modality};

pub const HELDOUT_DATASET: &str = "heldout";
const MAX_TRIES: usize = 10_000;
const MAX_SIM: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub concepts: usize,
    pub dim: usize,
    pub items_per_modality: usize,
    #[serde(default)]
    pub heldout: usize,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            concepts: 32,
            dim: 64,
            items_per_modality: 4000,
            heldout: 1000,
            sigma: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptWorld {
    pub config: WorldConfig,
    /// C × d, unit rows.
    pub concepts: Vec<Vec<f64>>,
    /// d × d orthogonal, row-major; frozen modalities share one.
    pub transforms: BTreeMap<Modality, Vec<f64>>,
    /// Concept per store row, per modality.
    pub assignments: BTreeMap<Modality, Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub world: ConceptWorld,
    /// Encoder outputs, training items then held-out items.
    pub stores: BTreeMap<Modality, EmbeddingStore>,
    /// Retrieval views of the projected modalities, same rows as `stores`.
    pub retrieval: BTreeMap<Modality, EmbeddingStore>,
    concept_index: HashMap<(Modality, ItemId), usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Assignment {
    modality: Modality,
    id: ItemId,
    concept: usize,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

/// Unit vectors with pairwise similarity below 0.5.
fn sample_concepts(c: usize, d: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(c);
    for idx in 0..c {
        let mut placed = false;
        for _ in 0..MAX_TRIES {
            let mut v = gaussian(rng, d);
            normalize(&mut v);
            if out.iter().all(|u| dotf(u, &v) < MAX_SIM) {
                out.push(v);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::InfeasibleConcepts(idx));
        }
    }
    Ok(out)
}

fn dotf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// QR of a seeded Gaussian matrix with the sign of diag(R) folded into Q.
fn random_orthogonal(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let g = DMatrix::<f64>::from_fn(d, d, |_, _| rng.sample(StandardNormal));
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let mut out = Vec::with_capacity(d * d);
    for i in 0..d {
        for j in 0..d {
            out.push(q[(i, j)]);
        }
    }
    out
}

fn apply(q: &[f64], z: &[f64]) -> Vec<f64> {
    let d = z.len();
    let mut out: Vec<f64> = (0..d).map(|i| dotf(&q[i * d..(i + 1) * d], z)).collect();
    normalize(&mut out);
    out
}

fn to_store(m: Modality, dim: usize, rows: Vec<Vec<f64>>, items: Vec<ItemRecord>) -> Result<EmbeddingStore> {
    let data = rows.into_iter().flatten().map(|v| v as f32).collect();
    EmbeddingStore::new(m, dim, data, items, true)
}

/// Generates a world and one store per modality; deterministic per seed.
pub fn gen_world(cfg: &WorldConfig) -> Result<SynthWorld> {
    let (c, d) = (cfg.concepts, cfg.dim);
    if c < 2 || d < c.max(8) {
        return Err(Error::InvalidArgument(format!(
            "need concepts >= 2 and dim >= max(8, concepts), got {c} concepts in {d} dims"
        )));
    }
    if !(cfg.sigma >= 0.0 && cfg.sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma must be finite and >= 0, got {}", cfg.sigma)));
    }
    let concepts = sample_concepts(c, d, &mut rng_for(cfg.seed, 0))?;
    let mut trng = rng_for(cfg.seed, 1);
    let shared = random_orthogonal(d, &mut trng);
    let mut transforms = BTreeMap::new();
    for m in Modality::FROZEN {
        transforms.insert(m, shared.clone());
    }
    for m in Modality::PROJECTED {
        transforms.insert(m, random_orthogonal(d, &mut trng));
    }

    let latent = |rng: &mut ChaCha8Rng, k: usize| -> Vec<f64> {
        let g = gaussian(rng, d);
        concepts[k].iter().zip(&g).map(|(a, b)| a + cfg.sigma * b).collect()
    };

    // held-out instances share their latent across modalities
    let mut hrng = rng_for(cfg.seed, 2);
    let heldout: Vec<(usize, Vec<f64>)> = (0..cfg.heldout)
        .map(|_| {
            let k = hrng.random_range(0..c);
            (k, latent(&mut hrng, k))
        })
        .collect();

    let mut stores = BTreeMap::new();
    let mut retrieval = BTreeMap::new();
    let mut assignments = BTreeMap::new();
    let mut concept_index = HashMap::new();
    for m in Modality::ALL {
        let mut rng = rng_for(cfg.seed, 16 + m.code() as u64);
        let mut latents = Vec::with_capacity(cfg.items_per_modality + cfg.heldout);
        let mut items = Vec::with_capacity(latents.capacity());
        let mut ks = Vec::with_capacity(latents.capacity());
        for i in 0..cfg.items_per_modality {
            let k = rng.random_range(0..c);
            latents.push(latent(&mut rng, k));
            let id = ItemId::new(m.as_str(), i as u64)?;
            let mut rec = ItemRecord::train(id, m);
            if m == Modality::Text {
                rec = rec.with_caption(format!("concept {k} sample {i}"));
            }
            items.push(rec);
            ks.push(k);
        }
        for (i, (k, z)) in heldout.iter().enumerate() {
            latents.push(z.clone());
            items.push(ItemRecord::eval(ItemId::new(HELDOUT_DATASET, i as u64)?, m));
            ks.push(*k);
        }
        for (rec, &k) in items.iter().zip(&ks) {
            concept_index.insert((m, rec.id.clone()), k);
        }
        let q = &transforms[&m];
        let rows = latents.iter().map(|z| apply(q, z)).collect();
        if m.is_projected() {
            let rows = latents.iter().map(|z| apply(&shared, z)).collect();
            retrieval.insert(m, to_store(m, d, rows, items.clone())?);
        }
        stores.insert(m, to_store(m, d, rows, items)?);
        assignments.insert(m, ks);
    }
    Ok(SynthWorld {
        world: ConceptWorld {
            config: cfg.clone(),
            concepts,
            transforms,
            assignments,
        },
        stores,
        retrieval,
        concept_index,
    })
}

impl SynthWorld {
    pub fn store(&self, m: Modality) -> &EmbeddingStore {
        &self.stores[&m]
    }

    pub fn concept_of(&self, m: Modality, id: &ItemId) -> Option<usize> {
        self.concept_index.get(&(m, id.clone())).copied()
    }

    /// Held-out rows of one modality, in instance order.
    pub fn heldout(&self, m: Modality) -> EmbeddingStore {
        self.store(m).retain_rows(|r| r.is_eval())
    }

    /// Concept of every held-out instance, in instance order.
    pub fn heldout_concepts(&self) -> Vec<usize> {
        let n = self.world.config.items_per_modality;
        self.world.assignments[&Modality::Text][n..].to_vec()
    }

    /// Writes `world.json`, `<modality>.emb` (+ manifest), `<modality>.retrieval.emb`
    /// and `assignments.jsonl` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("world.json"), serde_json::to_vec_pretty(&self.world.config)?)?;
        let mut rows = Vec::new();
        for (m, store) in &self.stores {
            save_store(store, dir.join(format!("{m}.emb")))?;
            for (rec, &k) in store.items().iter().zip(&self.world.assignments[m]) {
                rows.push(Assignment {
                    modality: *m,
                    id: rec.id.clone(),
                    concept: k,
                });
            }
        }
        for (m, store) in &self.retrieval {
            save_store(store, dir.join(format!("{m}.retrieval.emb")))?;
        }
        write_jsonl(dir.join("assignments.jsonl"), &rows)
    }
}

/// Regenerates the world saved in `dir` from its `world.json`.
pub fn load_world(dir: impl AsRef<Path>) -> Result<SynthWorld> {
    let text = fs::read_to_string(dir.as_ref().join("world.json"))?;
    gen_world(&serde_json::from_str(&text)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptConfig {
    pub fraction: f64,
    /// Share of the uncorrupted pairs swapped for a same-concept item and labeled partial.
    #[serde(default)]
    pub partial_fraction: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corruption {
    pub quintuples: Vec<Quintuple>,
    pub labels: Vec<LabeledPair>,
    pub corrupted: usize,
    pub partial: usize,
}

/// Replaces a seeded share of caption/candidate pairs (audio and points slots)
/// with wrong-concept training items and labels every pair.
pub fn corrupt_pairs(quintuples: &[Quintuple], world: &SynthWorld, cfg: &CorruptConfig) -> Result<Corruption> {
    for f in [cfg.fraction, cfg.partial_fraction] {
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::InvalidArgument(format!("fraction {f} outside [0, 1]")));
        }
    }
    let c = world.world.config.concepts;
    // training items of each projected modality bucketed by concept
    let mut by_concept: BTreeMap<Modality, Vec<Vec<ItemId>>> = BTreeMap::new();
    for m in Modality::PROJECTED {
        let mut buckets = vec![Vec::new(); c];
        for (rec, &k) in world.store(m).items().iter().zip(&world.world.assignments[&m]) {
            if !rec.is_eval() {
                buckets[k].push(rec.id.clone());
            }
        }
        by_concept.insert(m, buckets);
    }
    let mut rng = rng_for(cfg.seed, 3);
    let mut out = Vec::with_capacity(quintuples.len());
    let mut labels = Vec::with_capacity(quintuples.len() * 2);
    let (mut corrupted, mut partial) = (0, 0);
    for q in quintuples {
        let mut q = q.clone();
        let caption_concept = world
            .concept_of(Modality::Text, &q.caption)
            .ok_or_else(|| Error::MissingEmbedding(q.caption.clone(), Modality::Text))?;
        for m in Modality::PROJECTED {
            let buckets = &by_concept[&m];
            let current = q.member(m).clone();
            let roll: f64 = rng.random();
            let p = if roll < cfg.fraction {
                let k = loop {
                    let k = rng.random_range(0..c);
                    if k != caption_concept && !buckets[k].is_empty() {
                        break k;
                    }
                };
                *q.member_mut(m) = buckets[k].choose(&mut rng).expect("non-empty").clone();
                corrupted += 1;
                0.0
            } else if cfg.partial_fraction > 0.0 && rng.random::<f64>() < cfg.partial_fraction {
                let same: Vec<&ItemId> = buckets[caption_concept].iter().filter(|id| **id != current).collect();
                match same.choose(&mut rng) {
                    Some(id) => {
                        *q.member_mut(m) = (*id).clone();
                        partial += 1;
                        0.5
                    }
                    None => 1.0,
                }
            } else {
                1.0
            };
            labels.push(LabeledPair {
                caption_id: q.caption.clone(),
                candidate_id: q.member(m).clone(),
                modality: m,
                p,
            });
        }
        out.push(q);
    }
    Ok(Corruption {
        quintuples: out,
        labels,
        corrupted,
        partial,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(sigma: f64, seed: u64) -> SynthWorld {
        gen_world(&WorldConfig {
            concepts: 6,
            dim: 16,
            items_per_modality: 60,
            heldout: 20,
            sigma,
            seed,
        })
        .unwrap()
    }

    fn dot32(a: &[f32], b: &[f32]) -> f64 {
        a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
    }

    #[test]
    fn noiseless_same_concept_items_coincide() {
        let w = small(0.0, 1);
        let s = w.store(Modality::Image);
        let ks = &w.world.assignments[&Modality::Image];
        for i in 0..s.count() {
            for j in 0..i {
                let sim = dot32(s.row(i), s.row(j));
                if ks[i] == ks[j] {
                    assert!((sim - 1.0).abs() < 1e-6);
                } else {
                    assert!(sim < 0.5 + 1e-6);
                }
            }
        }
    }

    #[test]
    fn transforms_are_orthogonal_and_shared() {
        let w = small(0.05, 2);
        let d = 16;
        for q in w.world.transforms.values() {
            for i in 0..d {
                for j in 0..d {
                    let v: f64 = (0..d).map(|k| q[k * d + i] * q[k * d + j]).sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((v - want).abs() < 1e-6);
                }
            }
        }
        let t = &w.world.transforms;
        assert_eq!(t[&Modality::Text], t[&Modality::Video]);
        assert_ne!(t[&Modality::Text], t[&Modality::Audio]);
        assert_ne!(t[&Modality::Audio], t[&Modality::Points]);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = small(0.05, 3);
        let b = small(0.05, 3);
        let c = small(0.05, 4);
        for m in Modality::ALL {
            assert_eq!(a.store(m).data(), b.store(m).data());
            assert_ne!(a.store(m).data(), c.store(m).data());
        }
    }

    #[test]
    fn oracle_alignment_recovers_frozen_view() {
        let w = small(0.0, 5);
        let d = 16;
        let qa = &w.world.transforms[&Modality::Audio];
        let qf = &w.world.transforms[&Modality::Text];
        let audio = w.heldout(Modality::Audio);
        let text = w.heldout(Modality::Text);
        for i in 0..audio.count() {
            let a: Vec<f64> = audio.row(i).iter().map(|&v| v as f64).collect();
            // Q_f Q_a^T a
            let back: Vec<f64> = (0..d).map(|r| (0..d).map(|k| qa[k * d + r] * a[k]).sum()).collect();
            let mapped: Vec<f64> = (0..d).map(|r| dotf(&qf[r * d..(r + 1) * d], &back)).collect();
            let t: Vec<f64> = text.row(i).iter().map(|&v| v as f64).collect();
            assert!((dotf(&mapped, &t) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn noiseless_items_classify_to_their_concept() {
        let w = small(0.0, 6);
        for m in Modality::FROZEN {
            let s = w.store(m);
            let q = &w.world.transforms[&m];
            let mapped: Vec<Vec<f64>> = w.world.concepts.iter().map(|c| apply(q, c)).collect();
            for (i, &k) in w.world.assignments[&m].iter().enumerate() {
                let row: Vec<f64> = s.row(i).iter().map(|&v| v as f64).collect();
                let best = (0..mapped.len())
                    .max_by(|&a, &b| dotf(&mapped[a], &row).total_cmp(&dotf(&mapped[b], &row)))
                    .unwrap();
                assert_eq!(best, k);
            }
        }
    }

    #[test]
    fn heldout_is_eval_split_and_shares_concepts() {
        let w = small(0.05, 7);
        assert_eq!(w.heldout(Modality::Points).count(), 20);
        assert_eq!(w.store(Modality::Points).count(), 80);
        let ks = w.heldout_concepts();
        for m in Modality::ALL {
            for (i, &k) in ks.iter().enumerate() {
                let id = ItemId::new(HELDOUT_DATASET, i as u64).unwrap();
                assert_eq!(w.concept_of(m, &id), Some(k));
            }
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut cfg = WorldConfig {
            concepts: 20,
            dim: 10,
            ..WorldConfig::default()
        };
        assert!(gen_world(&cfg).is_err());
        cfg.concepts = 1;
        assert!(gen_world(&cfg).is_err());
    }

    #[test]
    fn infeasible_concepts() {
        // 1000 directions in 8 dims, pairwise cosine < 0.5: random draws stall long before
        let err = sample_concepts(1000, 8, &mut rng_for(0, 0)).unwrap_err();
        assert!(matches!(err, Error::InfeasibleConcepts(_)));
    }

    fn fake_quintuples(w: &SynthWorld, n: usize) -> Vec<Quintuple> {
        (0..n)
            .map(|i| {
                let id = |m: Modality| w.store(m).items()[i % 60].id.clone();
                Quintuple {
                    caption: id(Modality::Text),
                    image: id(Modality::Image),
                    video: id(Modality::Video),
                    audio: id(Modality::Audio),
                    points: id(Modality::Points),
                    score_image: 0.0,
                    score_video: 0.0,
                    score_audio: 0.0,
                    score_points: 0.0,
                }
            })
            .collect()
    }

    #[test]
    fn corruption_extremes() {
        let w = small(0.05, 8);
        let qs = fake_quintuples(&w, 50);
        let none = corrupt_pairs(&qs, &w, &CorruptConfig { fraction: 0.0, partial_fraction: 0.0, seed: 1 }).unwrap();
        assert_eq!(none.quintuples, qs);
        assert!(none.labels.iter().all(|l| l.p == 1.0));
        let all = corrupt_pairs(&qs, &w, &CorruptConfig { fraction: 1.0, partial_fraction: 0.0, seed: 1 }).unwrap();
        assert!(all.labels.iter().all(|l| l.p == 0.0));
        for (l, q) in all.labels.iter().zip(all.quintuples.iter().flat_map(|q| [q, q])) {
            let kc = w.concept_of(Modality::Text, &q.caption).unwrap();
            assert_ne!(w.concept_of(l.modality, &l.candidate_id).unwrap(), kc);
        }
    }

    #[test]
    fn corruption_count_is_binomial() {
        let w = small(0.05, 9);
        let qs = fake_quintuples(&w, 5000);
        let out = corrupt_pairs(&qs, &w, &CorruptConfig { fraction: 0.3, partial_fraction: 0.0, seed: 2 }).unwrap();
        assert_eq!(out.labels.len(), 10_000);
        // 99% interval: 3000 ± 2.576·sqrt(10000·0.3·0.7)
        let half = 2.576 * (10_000.0f64 * 0.3 * 0.7).sqrt();
        assert!((out.corrupted as f64 - 3000.0).abs() <= half, "{}", out.corrupted);
        assert_eq!(out.labels.iter().filter(|l| l.p == 0.0).count(), out.corrupted);
    }

    #[test]
    fn partial_swaps_keep_concept() {
        let w = small(0.05, 10);
        let qs = fake_quintuples(&w, 200);
        let out = corrupt_pairs(&qs, &w, &CorruptConfig { fraction: 0.0, partial_fraction: 0.5, seed: 3 }).unwrap();
        assert!(out.partial > 0);
        for l in out.labels.iter().filter(|l| l.p == 0.5) {
            let kc = w.concept_of(Modality::Text, &l.caption_id).unwrap();
            assert_eq!(w.concept_of(l.modality, &l.candidate_id).unwrap(), kc);
        }
    }

    #[test]
    fn save_writes_everything() {
        let w = small(0.05, 11);
        let dir = tempfile::tempdir().unwrap();
        w.save(dir.path()).unwrap();
        for name in ["world.json", "audio.emb", "audio.emb.jsonl", "points.retrieval.emb", "assignments.jsonl"] {
            assert!(dir.path().join(name).exists(), "{name}");
        }
        let back = crate::store::load_store(dir.path().join("text.emb")).unwrap();
        assert_eq!(back.data(), w.store(Modality::Text).data());
        let again = load_world(dir.path()).unwrap();
        assert_eq!(again.store(Modality::Points).data(), w.store(Modality::Points).data());
    }
}
