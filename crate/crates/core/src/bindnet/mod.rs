//! Projectors, temperatures and the batch objective.

pub mod checkpoint;
pub mod gradcheck;
pub mod loss;
pub mod projector;

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::store::{EmbeddingStore, UNIT_NORM_TOL};
use crate::types::Modality;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Stage};
pub use loss::{graded_infonce, pair_logits, row_softmax};
pub use projector::{gelu, projector_forward, ProjectorDims, ProjectorParams};

pub const TAU_INIT: f64 = 0.07;
pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 1.0;

pub type PairKey = (Modality, Modality);

/// Per (projected, frozen) pair temperature, stored as `ln tau`.
#[derive(Debug, Clone, PartialEq)]
pub struct TemperatureSet {
    log_tau: BTreeMap<PairKey, f64>,
}

impl Default for TemperatureSet {
    fn default() -> Self {
        Self::new()
    }
}

impl TemperatureSet {
    /// Every projected × frozen pair at `TAU_INIT`.
    pub fn new() -> Self {
        let mut log_tau = BTreeMap::new();
        for p in Modality::PROJECTED {
            for f in Modality::FROZEN {
                log_tau.insert((p, f), TAU_INIT.ln());
            }
        }
        Self { log_tau }
    }

    pub fn from_map(log_tau: BTreeMap<PairKey, f64>) -> Result<Self> {
        for (&(p, f), v) in &log_tau {
            if !p.is_projected() || !f.is_frozen() {
                return Err(Error::UnknownPair(p, f));
            }
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("log temperature for {p}/{f}")));
            }
        }
        Ok(Self { log_tau })
    }

    pub fn log_tau(&self, projected: Modality, frozen: Modality) -> Result<f64> {
        self.log_tau
            .get(&(projected, frozen))
            .copied()
            .ok_or(Error::UnknownPair(projected, frozen))
    }

    pub fn tau(&self, projected: Modality, frozen: Modality) -> Result<f64> {
        self.log_tau(projected, frozen).map(f64::exp)
    }

    /// Sets `ln tau`, clamping tau into `[TAU_MIN, TAU_MAX]`.
    pub fn set_log_tau(&mut self, projected: Modality, frozen: Modality, value: f64) -> Result<()> {
        let slot = self
            .log_tau
            .get_mut(&(projected, frozen))
            .ok_or(Error::UnknownPair(projected, frozen))?;
        *slot = value.clamp(TAU_MIN.ln(), TAU_MAX.ln());
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (PairKey, f64)> + '_ {
        self.log_tau.iter().map(|(&k, &v)| (k, v))
    }

    /// `"audio/text" -> tau` for every pair owned by `projected`.
    pub fn tau_values(&self, projected: Modality) -> BTreeMap<String, f64> {
        self.iter()
            .filter(|((p, _), _)| *p == projected)
            .map(|((p, f), v)| (format!("{p}/{f}"), v.exp()))
            .collect()
    }
}

/// Both projectors plus temperatures.
#[derive(Debug, Clone, PartialEq)]
pub struct BindModel {
    pub audio: ProjectorParams,
    pub points: ProjectorParams,
    pub temps: TemperatureSet,
}

impl BindModel {
    pub fn init(audio: ProjectorDims, points: ProjectorDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let audio = ProjectorParams::init(audio, &mut rng);
        let points = ProjectorParams::init(points, &mut rng);
        Self {
            audio,
            points,
            temps: TemperatureSet::new(),
        }
    }

    pub fn projector(&self, m: Modality) -> Result<&ProjectorParams> {
        match m {
            Modality::Audio => Ok(&self.audio),
            Modality::Points => Ok(&self.points),
            _ => Err(Error::InvalidArgument(format!("{m} has no projector"))),
        }
    }

    pub fn projector_mut(&mut self, m: Modality) -> Result<&mut ProjectorParams> {
        match m {
            Modality::Audio => Ok(&mut self.audio),
            Modality::Points => Ok(&mut self.points),
            _ => Err(Error::InvalidArgument(format!("{m} has no projector"))),
        }
    }

    /// Maps a store into the shared space. Frozen stores pass through unchanged.
    pub fn project_store(&self, store: &EmbeddingStore) -> Result<EmbeddingStore> {
        let m = store.modality();
        if m.is_frozen() {
            if !store.is_normalized() {
                return Err(Error::NotNormalized);
            }
            return Ok(store.clone());
        }
        let params = self.projector(m)?;
        let out_dim = params.dims().output;
        let mut data = Vec::with_capacity(store.count() * out_dim);
        const CHUNK: usize = 4096;
        let rows: Vec<f64> = store.data().iter().map(|&v| v as f64).collect();
        for chunk in rows.chunks(CHUNK * store.dim().max(1)) {
            let n = chunk.len() / store.dim();
            let x = ArrayView2::from_shape((n, store.dim()), chunk)
                .map_err(|e| Error::InvalidArgument(e.to_string()))?;
            let y = projector_forward(params, x)?;
            data.extend(y.iter().map(|&v| v as f32));
        }
        store.with_data(out_dim, data, true)
    }
}

/// One training batch for a single projector.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub projected: Modality,
    /// B × dim_in raw encoder outputs.
    pub a_in: Array2<f64>,
    /// (modality, B × dim_out unit rows), m ≥ 1 blocks.
    pub frozen: Vec<(Modality, Array2<f64>)>,
    pub p: Vec<f64>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.a_in.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.a_in.nrows() == 0
    }

    fn validate(&self, params: &ProjectorParams) -> Result<()> {
        let b = self.a_in.nrows();
        if b < 2 {
            return Err(Error::DegenerateBatch(b));
        }
        if self.frozen.is_empty() {
            return Err(Error::InvalidArgument("batch has no frozen modality".into()));
        }
        if self.p.len() != b {
            return Err(Error::InvalidArgument(format!("{} targets for {b} rows", self.p.len())));
        }
        let out = params.dims().output;
        for (m, block) in &self.frozen {
            if block.dim() != (b, out) {
                return Err(Error::DimMismatch {
                    expected: out,
                    got: block.ncols(),
                });
            }
            if !m.is_frozen() {
                return Err(Error::InvalidArgument(format!("{m} is not a frozen modality")));
            }
            for row in block.rows() {
                if (row.dot(&row).sqrt() - 1.0).abs() > UNIT_NORM_TOL {
                    return Err(Error::NotNormalized);
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchGrads {
    pub projector: ProjectorParams,
    pub log_tau: BTreeMap<PairKey, f64>,
}

/// Sum over frozen blocks of the loss in both softmax directions, with exact gradients.
pub fn batch_loss(params: &ProjectorParams, temps: &TemperatureSet, batch: &TrainBatch) -> Result<(f64, BatchGrads)> {
    batch.validate(params)?;
    let taus = batch
        .frozen
        .iter()
        .map(|(m, _)| temps.log_tau(batch.projected, *m))
        .collect::<Result<Vec<_>>>()?;
    let cache = projector::forward_cached(params, batch.a_in.view())?;
    let y = &cache.out;
    let mut total = 0.0;
    let mut d_y = Array2::<f64>::zeros(y.raw_dim());
    let mut log_tau = BTreeMap::new();
    for ((m, block), &lt) in batch.frozen.iter().zip(&taus) {
        let tau = lt.exp();
        let s = pair_logits(y.view(), block.view(), tau)?;
        let (l_ab, g_ab) = loss::graded_infonce_grad(s.view(), &batch.p)?;
        let (l_ba, g_ba) = loss::graded_infonce_grad(s.t(), &batch.p)?;
        total += l_ab + l_ba;
        let d_s = g_ab + g_ba.t();
        // S = Y Fᵀ / tau
        d_y.scaled_add(1.0 / tau, &d_s.dot(block));
        // dS/d(ln tau) = -S
        *log_tau.entry((batch.projected, *m)).or_insert(0.0) -= (&d_s * &s).sum();
    }
    let projector = projector::backward(params, &cache, &d_y);
    Ok((total, BatchGrads { projector, log_tau }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::Rng;

    fn unit_rows(rng: &mut ChaCha8Rng, b: usize, d: usize) -> Array2<f64> {
        let mut a = Array::from_shape_fn((b, d), |_| rng.random_range(-1.0f64..1.0));
        for mut row in a.rows_mut() {
            let n = row.dot(&row).sqrt();
            row /= n;
        }
        a
    }

    fn random_batch(rng: &mut ChaCha8Rng, dims: ProjectorDims, b: usize, frozen: &[Modality]) -> TrainBatch {
        TrainBatch {
            projected: Modality::Audio,
            a_in: Array::from_shape_fn((b, dims.input), |_| rng.random_range(-1.0..1.0)),
            frozen: frozen.iter().map(|&m| (m, unit_rows(rng, b, dims.output))).collect(),
            p: (0..b).map(|_| [0.0, 0.5, 1.0][rng.random_range(0..3)]).collect(),
        }
    }

    fn random_temps(rng: &mut ChaCha8Rng) -> TemperatureSet {
        let mut t = TemperatureSet::new();
        for f in Modality::FROZEN {
            t.set_log_tau(Modality::Audio, f, rng.random_range(0.05f64..0.5).ln()).unwrap();
        }
        t
    }

    fn loss_only(p: &ProjectorParams, t: &TemperatureSet, b: &TrainBatch) -> f64 {
        batch_loss(p, t, b).unwrap().0
    }

    fn gradient_configs(seed: u64) -> Vec<(ProjectorParams, TemperatureSet, TrainBatch)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = ProjectorDims::new(8, 16, 8);
        let mut out = Vec::new();
        for b in [2, 4, 8] {
            for frozen in [&[Modality::Text][..], &[Modality::Text, Modality::Image]] {
                for _ in 0..4 {
                    let params = ProjectorParams::init(dims, &mut rng);
                    let temps = random_temps(&mut rng);
                    out.push((params, temps, random_batch(&mut rng, dims, b, frozen)));
                }
            }
        }
        out
    }

    #[test]
    fn every_coordinate_matches_at_step_1e3() {
        let configs = gradient_configs(10);
        assert!(configs.len() >= 20);
        for (params, temps, batch) in &configs {
            let r = gradcheck::coordinate_check(params, temps, batch, 1e-3).unwrap();
            assert!(r.max_rel_err <= 1e-4, "B={} rel err {}", batch.len(), r.max_rel_err);
            assert_eq!(r.comparisons, params.param_count() + batch.frozen.len());
        }
    }

    #[test]
    fn directional_derivatives_match_at_step_1e3() {
        for (i, (params, temps, batch)) in gradient_configs(20).iter().enumerate() {
            let r = gradcheck::directional_check(params, temps, batch, 1e-3, 4, i as u64).unwrap();
            assert!(r.max_rel_err <= 1e-4, "B={} rel err {}", batch.len(), r.max_rel_err);
        }
    }

    #[test]
    fn single_block_equals_both_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dims = ProjectorDims::new(8, 16, 8);
        let params = ProjectorParams::init(dims, &mut rng);
        let temps = random_temps(&mut rng);
        let batch = random_batch(&mut rng, dims, 5, &[Modality::Video]);
        let y = projector_forward(&params, batch.a_in.view()).unwrap();
        let tau = temps.tau(Modality::Audio, Modality::Video).unwrap();
        let s = pair_logits(y.view(), batch.frozen[0].1.view(), tau).unwrap();
        let want = graded_infonce(s.view(), &batch.p).unwrap() + graded_infonce(s.t(), &batch.p).unwrap();
        assert!((loss_only(&params, &temps, &batch) - want).abs() < 1e-12);
    }

    #[test]
    fn duplicated_block_doubles_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let dims = ProjectorDims::new(8, 16, 8);
        let params = ProjectorParams::init(dims, &mut rng);
        let temps = TemperatureSet::new();
        let mut batch = random_batch(&mut rng, dims, 6, &[Modality::Text]);
        let single = loss_only(&params, &temps, &batch);
        batch.frozen.push(batch.frozen[0].clone());
        assert_eq!(loss_only(&params, &temps, &batch), 2.0 * single);
    }

    #[test]
    fn all_positive_targets_give_plain_infonce() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let s = Array::from_shape_fn((7, 7), |_| rng.random_range(-5.0..5.0));
        let p = vec![1.0; 7];
        let sm = row_softmax(s.view());
        let plain = -(0..7).map(|i| sm[[i, i]].ln()).sum::<f64>() / 7.0;
        assert!((graded_infonce(s.view(), &p).unwrap() - plain).abs() < 1e-12);
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let dims = ProjectorDims::new(8, 16, 8);
        let params = ProjectorParams::init(dims, &mut rng);
        let temps = random_temps(&mut rng);
        let batch = random_batch(&mut rng, dims, 8, &[Modality::Text, Modality::Image]);
        let perm = [3usize, 0, 7, 1, 6, 2, 5, 4];
        let permuted = TrainBatch {
            projected: batch.projected,
            a_in: batch.a_in.select(ndarray::Axis(0), &perm),
            frozen: batch
                .frozen
                .iter()
                .map(|(m, f)| (*m, f.select(ndarray::Axis(0), &perm)))
                .collect(),
            p: perm.iter().map(|&i| batch.p[i]).collect(),
        };
        let a = loss_only(&params, &temps, &batch);
        let b = loss_only(&params, &temps, &permuted);
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn temperature_scaling_keeps_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let a = unit_rows(&mut rng, 6, 5);
        let b = unit_rows(&mut rng, 6, 5);
        let argmax = |s: &Array2<f64>| -> Vec<usize> {
            s.rows()
                .into_iter()
                .map(|r| (0..r.len()).fold(0, |best, j| if r[j] > r[best] { j } else { best }))
                .collect()
        };
        let s1 = row_softmax(pair_logits(a.view(), b.view(), 0.07).unwrap().view());
        let s2 = row_softmax(pair_logits(a.view(), b.view(), 0.7).unwrap().view());
        assert_ne!(s1, s2);
        assert_eq!(argmax(&s1), argmax(&s2));
    }

    #[test]
    fn unknown_pair_and_degenerate_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let dims = ProjectorDims::new(8, 16, 8);
        let params = ProjectorParams::init(dims, &mut rng);
        let mut temps_map = BTreeMap::new();
        temps_map.insert((Modality::Audio, Modality::Text), 0.07f64.ln());
        let temps = TemperatureSet::from_map(temps_map).unwrap();
        let batch = random_batch(&mut rng, dims, 4, &[Modality::Image]);
        assert!(matches!(
            batch_loss(&params, &temps, &batch),
            Err(Error::UnknownPair(Modality::Audio, Modality::Image))
        ));
        let small = random_batch(&mut rng, dims, 1, &[Modality::Text]);
        assert!(matches!(batch_loss(&params, &temps, &small), Err(Error::DegenerateBatch(1))));
    }

    #[test]
    fn temperatures_start_at_init_and_clamp() {
        let mut t = TemperatureSet::new();
        assert_eq!(t.iter().count(), 6);
        assert!((t.tau(Modality::Points, Modality::Video).unwrap() - 0.07).abs() < 1e-12);
        t.set_log_tau(Modality::Audio, Modality::Text, 5.0).unwrap();
        assert!((t.tau(Modality::Audio, Modality::Text).unwrap() - 1.0).abs() < 1e-12);
        t.set_log_tau(Modality::Audio, Modality::Text, -50.0).unwrap();
        assert!((t.tau(Modality::Audio, Modality::Text).unwrap() - 0.01).abs() < 1e-12);
        assert!(t.tau(Modality::Text, Modality::Audio).is_err());
    }

    #[test]
    fn project_store_outputs_unit_rows() {
        let model = BindModel::init(ProjectorDims::new(6, 12, 4), ProjectorDims::new(5, 10, 4), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let rows: Vec<Vec<f32>> = (0..9).map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let store = EmbeddingStore::from_rows(Modality::Audio, "ds", &rows, false).unwrap();
        let out = model.project_store(&store).unwrap();
        assert_eq!(out.dim(), 4);
        assert!(out.is_normalized());
        assert_eq!(out.items(), store.items());
    }
}
