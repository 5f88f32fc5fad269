//! Retrieval recall, zero-shot classification, multi-label mAP and EShot.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::simindex::{build_exact, dot};
use crate::store::{mean_pool, EmbeddingStore};
use crate::types::{ItemId, ItemRecord, Modality};

pub const METRIC_RECALL: &str = "R@k";
pub const METRIC_TOPK: &str = "Top-k accuracy";
pub const METRIC_MAP: &str = "mAP";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub metric: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    pub value: f64,
    pub support: usize,
    #[serde(default)]
    pub config_hash: String,
}

impl EvalReport {
    fn new(task: &str, metric: &str, k: Option<usize>, value: f64, support: usize) -> Self {
        Self {
            task: task.to_string(),
            metric: metric.to_string(),
            k,
            value,
            support,
            config_hash: String::new(),
        }
    }
}

/// First 16 hex chars of the SHA-256 of a config's JSON form.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
}

pub fn stamp(reports: &mut [EvalReport], hash: &str) {
    for r in reports {
        r.config_hash = hash.to_string();
    }
}

/// Relevant gallery ids per query id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub relevant: BTreeMap<ItemId, BTreeSet<ItemId>>,
}

impl GroundTruth {
    pub fn insert(&mut self, query: ItemId, target: ItemId) {
        self.relevant.entry(query).or_default().insert(target);
    }

    /// Each query id relevant to the gallery item with the same id.
    pub fn identity<'a>(ids: impl IntoIterator<Item = &'a ItemId>) -> Self {
        let mut gt = Self::default();
        for id in ids {
            gt.insert(id.clone(), id.clone());
        }
        gt
    }

    /// Swaps query and gallery roles.
    pub fn reversed(&self) -> Self {
        let mut gt = Self::default();
        for (q, targets) in &self.relevant {
            for t in targets {
                gt.insert(t.clone(), q.clone());
            }
        }
        gt
    }
}

fn sorted_ks(ks: &[usize]) -> Result<Vec<usize>> {
    let ks: BTreeSet<usize> = ks.iter().copied().collect();
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::InvalidArgument("k values must be >= 1".into()));
    }
    Ok(ks.into_iter().collect())
}

/// R@k: share of queries with any relevant gallery item among the top k by cosine.
pub fn retrieval_recall(
    task: &str,
    queries: &EmbeddingStore,
    gallery: &EmbeddingStore,
    gt: &GroundTruth,
    ks: &[usize],
) -> Result<Vec<EvalReport>> {
    let ks = sorted_ks(ks)?;
    if queries.is_empty() {
        return Err(Error::InvalidArgument("no queries".into()));
    }
    let relevant: Vec<&BTreeSet<ItemId>> = queries
        .items()
        .iter()
        .map(|r| gt.relevant.get(&r.id).ok_or_else(|| Error::MissingGroundTruth(r.id.clone())))
        .collect::<Result<_>>()?;
    let kmax = *ks.last().expect("non-empty");
    let index = build_exact(gallery.clone())?;
    let hits = index.search(queries, kmax)?;
    let mut reports = Vec::with_capacity(ks.len());
    for &k in &ks {
        let found = hits
            .iter()
            .zip(&relevant)
            .filter(|(h, rel)| h.iter().take(k).any(|hit| rel.contains(&hit.id)))
            .count();
        reports.push(EvalReport::new(
            task,
            METRIC_RECALL,
            Some(k),
            found as f64 / queries.count() as f64,
            queries.count(),
        ));
    }
    Ok(reports)
}

fn representatives(modality: Modality, classes: &[(String, Vec<Vec<f32>>)]) -> Result<EmbeddingStore> {
    let mut seen = BTreeSet::new();
    let mut rows = Vec::with_capacity(classes.len());
    let mut items = Vec::with_capacity(classes.len());
    for (i, (name, members)) in classes.iter().enumerate() {
        if !seen.insert(name) {
            return Err(Error::InvalidArgument(format!("duplicate class name {name:?}")));
        }
        if members.is_empty() {
            return Err(Error::EmptyClass(i));
        }
        let rep = mean_pool(members, true).map_err(|e| match e {
            Error::ZeroVector(_) => Error::ZeroVector(i),
            other => other,
        })?;
        rows.push(rep);
        items.push(ItemRecord::train(ItemId::new("class", i as u64)?, modality).with_caption(name.clone()));
    }
    let dim = rows.first().map_or(0, Vec::len);
    EmbeddingStore::new(modality, dim, rows.concat(), items, true)
}

/// Renormalized mean of each class's member embeddings. Class names go to the captions.
pub fn class_representatives(modality: Modality, classes: &[(String, Vec<Vec<f32>>)]) -> Result<EmbeddingStore> {
    representatives(modality, classes)
}

/// Renormalized mean of each class's prompt-template embeddings.
pub fn template_representatives(modality: Modality, templates: &[(String, Vec<Vec<f32>>)]) -> Result<EmbeddingStore> {
    representatives(modality, templates)
}

/// Classes ordered by similarity, descending; ties go to the lower class index.
pub fn class_rankings(items: &EmbeddingStore, reps: &EmbeddingStore) -> Result<Vec<Vec<usize>>> {
    if items.dim() != reps.dim() {
        return Err(Error::DimMismatch {
            expected: reps.dim(),
            got: items.dim(),
        });
    }
    if !reps.is_normalized() {
        return Err(Error::NotNormalized);
    }
    Ok((0..items.count())
        .into_par_iter()
        .map(|i| {
            let q = items.row(i);
            let sims: Vec<f64> = (0..reps.count()).map(|c| dot(q, reps.row(c))).collect();
            let mut order: Vec<usize> = (0..reps.count()).collect();
            order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
            order
        })
        .collect())
}

/// Top-k accuracy against class representatives.
pub fn zeroshot_classify(
    task: &str,
    items: &EmbeddingStore,
    reps: &EmbeddingStore,
    true_class: &[usize],
    ks: &[usize],
) -> Result<Vec<EvalReport>> {
    let ks = sorted_ks(ks)?;
    if true_class.len() != items.count() {
        return Err(Error::ClassCountMismatch(format!(
            "{} labels for {} items",
            true_class.len(),
            items.count()
        )));
    }
    if let Some(&bad) = true_class.iter().find(|&&c| c >= reps.count()) {
        return Err(Error::ClassCountMismatch(format!(
            "label {bad} but only {} representatives",
            reps.count()
        )));
    }
    if items.is_empty() {
        return Err(Error::InvalidArgument("no items to classify".into()));
    }
    let ranks = class_rankings(items, reps)?;
    Ok(ks
        .iter()
        .map(|&k| {
            let hit = ranks
                .iter()
                .zip(true_class)
                .filter(|(r, c)| r.iter().take(k).any(|x| x == *c))
                .count();
            EvalReport::new(task, METRIC_TOPK, Some(k), hit as f64 / items.count() as f64, items.count())
        })
        .collect())
}

/// Average precision: precision at each positive's rank, averaged.
/// Items are ranked by score descending, ties by item index.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if positive[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Unweighted mean of per-class AP over an items × classes score matrix.
pub fn map_multilabel(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ClassCountMismatch(format!(
            "{} score rows vs {} label rows",
            scores.len(),
            labels.len()
        )));
    }
    let classes = scores.first().map_or(0, Vec::len);
    if classes == 0 {
        return Err(Error::InvalidArgument("no classes".into()));
    }
    if scores.iter().any(|r| r.len() != classes) || labels.iter().any(|r| r.len() != classes) {
        return Err(Error::ClassCountMismatch("ragged score or label matrix".into()));
    }
    let mut total = 0.0;
    for c in 0..classes {
        let col: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let pos: Vec<bool> = labels.iter().map(|r| r[c]).collect();
        total += average_precision(&col, &pos).ok_or(Error::EmptyClass(c))?;
    }
    Ok(total / classes as f64)
}

pub fn map_report(task: &str, scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<EvalReport> {
    let value = map_multilabel(scores, labels)?;
    Ok(EvalReport::new(task, METRIC_MAP, None, value, scores.len()))
}

/// Fixed-width text table, one row per report.
pub fn render_table(reports: &[EvalReport]) -> String {
    let width = reports.iter().map(|r| r.task.len()).max().unwrap_or(4).max(4);
    let mut out = format!("{:<width$}  {:<16}  {:>8}  {:>8}\n", "task", "metric", "value", "support");
    for r in reports {
        let metric = match r.k {
            Some(k) if r.metric == METRIC_RECALL => format!("R@{k}"),
            Some(k) => format!("Top-{k}"),
            None => r.metric.clone(),
        };
        out.push_str(&format!(
            "{:<width$}  {:<16}  {:>8.4}  {:>8}\n",
            r.task, metric, r.value, r.support
        ));
    }
    out
}

/// Bidirectional zero-shot between two projected modalities sharing class labels.
///
/// Direction 1 classifies points against audio class means, direction 2 the
/// reverse; Top-1 and Top-5 are reported per direction plus their means.
/// Items whose class has no members on the other side are left out.
pub fn eshot_eval(
    audio: &EmbeddingStore,
    audio_classes: &[usize],
    points: &EmbeddingStore,
    points_classes: &[usize],
) -> Result<Vec<EvalReport>> {
    if audio_classes.len() != audio.count() || points_classes.len() != points.count() {
        return Err(Error::ClassCountMismatch("class labels do not match item counts".into()));
    }
    let a: BTreeSet<usize> = audio_classes.iter().copied().collect();
    let p: BTreeSet<usize> = points_classes.iter().copied().collect();
    let shared: Vec<usize> = a.intersection(&p).copied().collect();
    if shared.len() < 2 {
        return Err(Error::NoSharedClasses);
    }
    let slot: BTreeMap<usize, usize> = shared.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let ks = [1, 5];

    let direction = |task: &str,
                     items: &EmbeddingStore,
                     item_classes: &[usize],
                     anchors: &EmbeddingStore,
                     anchor_classes: &[usize]|
     -> Result<Vec<EvalReport>> {
        let mut members: Vec<(String, Vec<Vec<f32>>)> =
            shared.iter().map(|c| (format!("class-{c}"), Vec::new())).collect();
        for (i, c) in anchor_classes.iter().enumerate() {
            if let Some(&s) = slot.get(c) {
                members[s].1.push(anchors.row(i).to_vec());
            }
        }
        let reps = class_representatives(anchors.modality(), &members)?;
        let keep: Vec<usize> = (0..items.count()).filter(|&i| slot.contains_key(&item_classes[i])).collect();
        let subset = items.select(&keep);
        let labels: Vec<usize> = keep.iter().map(|&i| slot[&item_classes[i]]).collect();
        zeroshot_classify(task, &subset, &reps, &labels, &ks)
    };
    let d1 = direction("eshot points->audio", points, points_classes, audio, audio_classes)?;
    let d2 = direction("eshot audio->points", audio, audio_classes, points, points_classes)?;
    let mut out = Vec::with_capacity(6);
    for (r1, r2) in d1.iter().zip(&d2) {
        out.push(EvalReport::new(
            "eshot mean",
            METRIC_TOPK,
            r1.k,
            0.5 * (r1.value + r2.value),
            r1.support + r2.support,
        ));
    }
    out.splice(0..0, d1.into_iter().chain(d2));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| (x / n) as f32).collect()
    }

    fn store(m: Modality, ds: &str, rows: &[Vec<f32>]) -> EmbeddingStore {
        EmbeddingStore::from_rows(m, ds, rows, true).unwrap()
    }

    fn basis(d: usize) -> Vec<Vec<f32>> {
        (0..d)
            .map(|i| {
                let mut r = vec![0.0; d];
                r[i] = 1.0;
                r
            })
            .collect()
    }

    #[test]
    fn identity_retrieval_is_perfect() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows: Vec<_> = (0..30).map(|_| unit(&mut rng, 8)).collect();
        let s = store(Modality::Text, "a", &rows);
        let gt = GroundTruth::identity(s.ids());
        for r in retrieval_recall("self", &s, &s, &gt, &[1, 5, 10]).unwrap() {
            assert_eq!(r.value, 1.0);
            assert_eq!(r.support, 30);
        }
    }

    #[test]
    fn recall_matches_naive_ranking() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q: Vec<_> = (0..40).map(|_| unit(&mut rng, 6)).collect();
        let g: Vec<_> = (0..25).map(|_| unit(&mut rng, 6)).collect();
        let qs = store(Modality::Audio, "q", &q);
        let gs = store(Modality::Text, "g", &g);
        let mut gt = GroundTruth::default();
        let targets: Vec<usize> = (0..40).map(|_| rng.random_range(0..25)).collect();
        for (i, &t) in targets.iter().enumerate() {
            gt.insert(qs.items()[i].id.clone(), gs.items()[t].id.clone());
        }
        let ks = [1, 3, 7];
        let reports = retrieval_recall("naive", &qs, &gs, &gt, &ks).unwrap();
        for (r, &k) in reports.iter().zip(&ks) {
            let mut hit = 0;
            for (i, &t) in targets.iter().enumerate() {
                let st: f64 = q[i].iter().zip(&g[t]).map(|(a, b)| *a as f64 * *b as f64).sum();
                // rank = number of gallery rows strictly better, or equal with a lower index
                let better = (0..25)
                    .filter(|&j| {
                        let sj: f64 = q[i].iter().zip(&g[j]).map(|(a, b)| *a as f64 * *b as f64).sum();
                        sj > st || (sj == st && j < t)
                    })
                    .count();
                if better < k {
                    hit += 1;
                }
            }
            assert_eq!(r.value, hit as f64 / 40.0, "k={k}");
        }
        assert!(reports.windows(2).all(|w| w[0].value <= w[1].value));
    }

    #[test]
    fn missing_ground_truth() {
        let s = store(Modality::Text, "a", &basis(3));
        let gt = GroundTruth::default();
        assert!(matches!(
            retrieval_recall("x", &s, &s, &gt, &[1]),
            Err(Error::MissingGroundTruth(_))
        ));
    }

    #[test]
    fn any_of_five_captions_counts() {
        // audio item 0 has five captions; only caption 3 lands in its top 5
        let d = 12;
        let b = basis(d);
        let q = store(Modality::Audio, "q", &b[..1]);
        let gallery_rows: Vec<Vec<f32>> = (0..10)
            .map(|j| {
                let mut r = vec![0.0f32; d];
                // distractors 5..10 score above the far captions
                let s = if j == 3 { 0.9 } else if j >= 5 { 0.8 - 0.01 * j as f32 } else { 0.1 };
                r[0] = s;
                r[1 + j] = (1.0 - s * s).sqrt();
                r
            })
            .collect();
        let g = store(Modality::Text, "g", &gallery_rows);
        let mut gt = GroundTruth::default();
        for j in 0..5 {
            gt.insert(q.items()[0].id.clone(), g.items()[j].id.clone());
        }
        let r = retrieval_recall("multi", &q, &g, &gt, &[1, 5]).unwrap();
        assert_eq!(r[0].value, 1.0);
        assert_eq!(r[1].value, 1.0);
        // reverse direction: every caption is its own query
        let rev = retrieval_recall("multi rev", &g.select(&[0, 1, 2, 3, 4]), &q, &gt.reversed(), &[1]).unwrap();
        assert_eq!(rev[0].support, 5);
        assert_eq!(rev[0].value, 1.0);
    }

    #[test]
    fn one_template_per_class_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows: Vec<_> = (0..5).map(|_| unit(&mut rng, 8)).collect();
        let t: Vec<(String, Vec<Vec<f32>>)> = rows.iter().enumerate().map(|(i, r)| (format!("c{i}"), vec![r.clone()])).collect();
        let reps = template_representatives(Modality::Text, &t).unwrap();
        for (i, r) in rows.iter().enumerate() {
            for (a, b) in r.iter().zip(reps.row(i)) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn class_means_are_renormalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let classes: Vec<(String, Vec<Vec<f32>>)> = (0..10)
            .map(|c| (format!("c{c}"), (0..rng.random_range(1..6)).map(|_| unit(&mut rng, 12)).collect()))
            .collect();
        let reps = class_representatives(Modality::Audio, &classes).unwrap();
        for (i, (_, members)) in classes.iter().enumerate() {
            let mut mean = vec![0.0f64; 12];
            for m in members {
                for (a, b) in mean.iter_mut().zip(m) {
                    *a += *b as f64 / members.len() as f64;
                }
            }
            let n = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
            for (a, b) in mean.iter().zip(reps.row(i)) {
                assert!((a / n - *b as f64).abs() < 1e-6);
            }
        }
        assert_eq!(reps.items()[3].caption.as_deref(), Some("c3"));
    }

    #[test]
    fn singleton_and_identical_classes() {
        let b = basis(4);
        let classes = vec![("a".to_string(), vec![b[0].clone()]), ("b".to_string(), vec![b[1].clone(); 8])];
        let reps = template_representatives(Modality::Text, &classes).unwrap();
        assert_eq!(reps.row(0), &b[0][..]);
        assert_eq!(reps.row(1), &b[1][..]);
        let dup = vec![("a".to_string(), vec![b[0].clone(), b[2].clone(), b[2].clone()])];
        let dedup = vec![("a".to_string(), vec![b[0].clone(), b[2].clone()])];
        // duplicates reweight the mean unless they are the whole set; only the all-equal case is invariant
        assert_ne!(
            template_representatives(Modality::Text, &dup).unwrap().data(),
            template_representatives(Modality::Text, &dedup).unwrap().data()
        );
        let twice = vec![("a".to_string(), vec![b[0].clone(), b[2].clone(), b[0].clone(), b[2].clone()])];
        assert_eq!(
            template_representatives(Modality::Text, &twice).unwrap().data(),
            template_representatives(Modality::Text, &dedup).unwrap().data()
        );
    }

    #[test]
    fn antipodal_class_is_zero_vector() {
        let classes = vec![
            ("ok".to_string(), vec![vec![1.0, 0.0]]),
            ("bad".to_string(), vec![vec![0.0, 1.0], vec![0.0, -1.0]]),
        ];
        assert!(matches!(
            class_representatives(Modality::Text, &classes),
            Err(Error::ZeroVector(1))
        ));
    }

    #[test]
    fn zeroshot_on_orthonormal_reps_and_tie_rule() {
        let b = basis(5);
        let reps = store(Modality::Text, "r", &b);
        let items = store(Modality::Audio, "i", &b);
        let r = zeroshot_classify("t", &items, &reps, &[0, 1, 2, 3, 4], &[1]).unwrap();
        assert_eq!(r[0].value, 1.0);
        let h = std::f32::consts::FRAC_1_SQRT_2;
        let reps = store(Modality::Text, "r", &basis(2));
        let tie = store(Modality::Audio, "i", &[vec![h, h]]);
        assert_eq!(class_rankings(&tie, &reps).unwrap()[0], vec![0, 1]);
        assert!(matches!(
            zeroshot_classify("t", &tie, &reps, &[0, 1], &[1]),
            Err(Error::ClassCountMismatch(_))
        ));
        assert!(matches!(
            zeroshot_classify("t", &tie, &reps, &[2], &[1]),
            Err(Error::ClassCountMismatch(_))
        ));
    }

    #[test]
    fn zeroshot_matches_exhaustive_table() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let reps: Vec<_> = (0..7).map(|_| unit(&mut rng, 10)).collect();
        let items: Vec<_> = (0..100).map(|_| unit(&mut rng, 10)).collect();
        let labels: Vec<usize> = (0..100).map(|_| rng.random_range(0..7)).collect();
        let rs = store(Modality::Text, "r", &reps);
        let is = store(Modality::Audio, "i", &items);
        let ranks = class_rankings(&is, &rs).unwrap();
        let mut correct = 0;
        for (i, item) in items.iter().enumerate() {
            let table: Vec<f64> = reps
                .iter()
                .map(|r| r.iter().zip(item).map(|(a, b)| *a as f64 * *b as f64).sum())
                .collect();
            let mut best = 0;
            for c in 1..7 {
                if table[c] > table[best] {
                    best = c;
                }
            }
            assert_eq!(ranks[i][0], best);
            correct += (best == labels[i]) as usize;
        }
        let r = zeroshot_classify("t", &is, &rs, &labels, &[1, 3, 7]).unwrap();
        assert_eq!(r[0].value, correct as f64 / 100.0);
        assert_eq!(r[2].value, 1.0);
        assert!(r.windows(2).all(|w| w[0].value <= w[1].value));
    }

    #[test]
    fn zeroshot_invariant_to_positive_rescaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let reps: Vec<_> = (0..4).map(|_| unit(&mut rng, 6)).collect();
        let items: Vec<_> = (0..20).map(|_| unit(&mut rng, 6)).collect();
        let scaled: Vec<Vec<f32>> = items.iter().map(|r| r.iter().map(|v| v * 3.5).collect()).collect();
        let rs = store(Modality::Text, "r", &reps);
        let a = class_rankings(&store(Modality::Audio, "i", &items), &rs).unwrap();
        let b = class_rankings(&EmbeddingStore::from_rows(Modality::Audio, "i", &scaled, false).unwrap(), &rs).unwrap();
        assert_eq!(a, b);
    }

    /// Quadratic-time AP: for each positive, count items ranked at or above it.
    fn naive_ap(scores: &[f64], pos: &[bool]) -> f64 {
        let ahead = |i: usize, j: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j < i);
        let positives: Vec<usize> = (0..scores.len()).filter(|&i| pos[i]).collect();
        let mut sum = 0.0;
        for &i in &positives {
            let rank = 1 + (0..scores.len()).filter(|&j| ahead(i, j)).count();
            let pos_at_or_above = 1 + positives.iter().filter(|&&j| ahead(i, j)).count();
            sum += pos_at_or_above as f64 / rank as f64;
        }
        sum / positives.len() as f64
    }

    #[test]
    fn map_small_cases() {
        assert_eq!(map_multilabel(&[vec![0.9], vec![0.1]], &[vec![true], vec![false]]).unwrap(), 1.0);
        assert_eq!(map_multilabel(&[vec![0.9], vec![0.1]], &[vec![false], vec![true]]).unwrap(), 0.5);
        assert!(matches!(
            map_multilabel(&[vec![0.9, 0.1]], &[vec![true, false]]),
            Err(Error::EmptyClass(1))
        ));
    }

    #[test]
    fn map_matches_quadratic_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let scores: Vec<Vec<f64>> = (0..50)
                .map(|_| (0..10).map(|_| (rng.random_range(0..20) as f64) / 20.0).collect())
                .collect();
            let mut labels: Vec<Vec<bool>> = (0..50).map(|_| (0..10).map(|_| rng.random_bool(0.2)).collect()).collect();
            for c in 0..10 {
                labels[c][c] = true;
            }
            let want: f64 = (0..10)
                .map(|c| {
                    let col: Vec<f64> = scores.iter().map(|r| r[c]).collect();
                    let pos: Vec<bool> = labels.iter().map(|r| r[c]).collect();
                    naive_ap(&col, &pos)
                })
                .sum::<f64>()
                / 10.0;
            assert!((map_multilabel(&scores, &labels).unwrap() - want).abs() < 1e-9);
        }
    }

    #[test]
    fn map_is_one_iff_positives_lead() {
        let scores = vec![vec![0.9, 0.2], vec![0.8, 0.7], vec![0.1, 0.9]];
        let labels = vec![vec![true, false], vec![true, true], vec![false, true]];
        assert_eq!(map_multilabel(&scores, &labels).unwrap(), 1.0);
        let labels = vec![vec![true, true], vec![true, false], vec![false, true]];
        assert!(map_multilabel(&scores, &labels).unwrap() < 1.0);
    }

    #[test]
    fn eshot_perfect_binding_and_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let protos: Vec<_> = (0..6).map(|_| unit(&mut rng, 16)).collect();
        let classes: Vec<usize> = (0..30).map(|i| i % 6).collect();
        let rows: Vec<_> = classes.iter().map(|&c| protos[c].clone()).collect();
        let a = store(Modality::Audio, "a", &rows);
        let p = store(Modality::Points, "p", &rows);
        let r = eshot_eval(&a, &classes, &p, &classes).unwrap();
        assert_eq!(r.len(), 6);
        for rep in r.iter().filter(|r| r.k == Some(1)) {
            assert_eq!(rep.value, 1.0);
        }
        // composition: points vs audio class means, by hand
        let members: Vec<(String, Vec<Vec<f32>>)> = (0..6)
            .map(|c| (format!("class-{c}"), rows.iter().zip(&classes).filter(|(_, k)| **k == c).map(|(r, _)| r.clone()).collect()))
            .collect();
        let reps = class_representatives(Modality::Audio, &members).unwrap();
        let manual = zeroshot_classify("eshot points->audio", &p, &reps, &classes, &[1, 5]).unwrap();
        assert_eq!(manual, r[..2].to_vec());
    }

    #[test]
    fn eshot_needs_two_shared_classes() {
        let b = basis(3);
        let a = store(Modality::Audio, "a", &b[..2]);
        let p = store(Modality::Points, "p", &b[1..]);
        assert!(matches!(eshot_eval(&a, &[0, 1], &p, &[1, 2]), Err(Error::NoSharedClasses)));
    }

    #[test]
    fn eshot_shuffled_labels_hit_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let protos: Vec<_> = (0..8).map(|_| unit(&mut rng, 16)).collect();
        let classes: Vec<usize> = (0..64).map(|i| i % 8).collect();
        let rows: Vec<_> = classes.iter().map(|&c| protos[c].clone()).collect();
        let a = store(Modality::Audio, "a", &rows);
        let p = store(Modality::Points, "p", &rows);
        let trials = 1000;
        let mut values = Vec::with_capacity(trials);
        for _ in 0..trials {
            let mut shuffled = classes.clone();
            use rand::seq::SliceRandom;
            shuffled.shuffle(&mut rng);
            let r = eshot_eval(&a, &classes, &p, &shuffled).unwrap();
            values.push(r.iter().find(|r| r.task == "eshot mean" && r.k == Some(1)).unwrap().value);
        }
        let mean = values.iter().sum::<f64>() / trials as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
        let se = (var / trials as f64).sqrt();
        assert!((mean - 1.0 / 8.0).abs() <= 3.0 * se, "mean {mean} se {se}");
    }

    #[test]
    fn report_json_shape() {
        let mut r = vec![
            EvalReport::new("t", METRIC_RECALL, Some(5), 0.5, 10),
            map_report("m", &[vec![0.9], vec![0.1]], &[vec![true], vec![false]]).unwrap(),
        ];
        let table = render_table(&r);
        assert!(table.contains("R@5") && table.contains("mAP"));
        stamp(&mut r, &config_hash(&("cfg", 1)).unwrap());
        let v: serde_json::Value = serde_json::to_value(&r[0]).unwrap();
        for key in ["task", "metric", "k", "value", "support", "config_hash"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(r[0].config_hash.len(), 16);
    }
}
