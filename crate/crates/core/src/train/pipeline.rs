use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::data::{assemble_batches, BatchStream, CaptionedPair, EmbeddingBank, LabeledPair, Splits, TaskKey};
use super::optim::{adamw_step, cosine_lr, AdamConfig};
use crate::bindnet::{batch_loss, save_checkpoint, BindModel, Checkpoint, ProjectorDims, Stage};
use crate::curate::Quintuple;
use crate::error::{Error, Result};
use crate::jsonl::{read_jsonl, write_jsonl_to};
use crate::store::{load_store, load_store_normalized};
use crate::types::Modality;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub stage: Stage,
    pub task: String,
    pub loss: f64,
    pub lr: f64,
    pub tau_values: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StagePlan {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: AdamConfig,
    /// Frozen sets trained on Split 1, per projector, round-robin.
    pub s1_frozen_sets: Vec<Vec<Modality>>,
    pub projected: Vec<Modality>,
}

impl Default for StagePlan {
    fn default() -> Self {
        Self {
            batch_size: 256,
            epochs: 2,
            seed: 0,
            optimizer: AdamConfig::default(),
            s1_frozen_sets: vec![
                vec![Modality::Text],
                vec![Modality::Image],
                vec![Modality::Video],
                vec![Modality::Text, Modality::Image, Modality::Video],
            ],
            projected: Modality::PROJECTED.to_vec(),
        }
    }
}

impl StagePlan {
    pub fn task_keys(&self, projected: Modality, stage: Stage) -> Result<Vec<TaskKey>> {
        match stage {
            Stage::S1 => self
                .s1_frozen_sets
                .iter()
                .map(|set| TaskKey::new(projected, set.iter().copied(), stage))
                .collect(),
            _ => Ok(vec![TaskKey::new(projected, [Modality::Text], stage)?]),
        }
    }

    /// Per-stage seed so a resumed pipeline shuffles exactly like a straight run.
    fn stage_seed(&self, stage: Stage) -> u64 {
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stage.code() as u64)
    }
}

/// Trains each projector on its task streams, interleaving tasks one batch at
/// a time; the cosine schedule spans that projector's total step count.
pub fn train_stage(
    ckpt: &mut Checkpoint,
    stage: Stage,
    splits: &Splits,
    bank: &EmbeddingBank,
    plan: &StagePlan,
) -> Result<Vec<MetricRecord>> {
    let mut log = Vec::new();
    let mut step = 0u64;
    for &projected in &plan.projected {
        let mut streams: Vec<BatchStream> = Vec::new();
        for key in plan.task_keys(projected, stage)? {
            let s = assemble_batches(splits, &key, bank, plan.batch_size, plan.epochs, plan.stage_seed(stage))?;
            if s.total() > 0 {
                streams.push(s);
            }
        }
        let total: usize = streams.iter().map(BatchStream::total).sum();
        let mut local = 0u64;
        while local < total as u64 {
            for stream in streams.iter_mut() {
                let Some(batch) = stream.next() else { continue };
                let lr = cosine_lr(local, total as u64, plan.optimizer.lr0);
                let task = stream.key().to_string();
                let Checkpoint {
                    model,
                    optim_audio,
                    optim_points,
                    ..
                } = ckpt;
                let (params, state) = match projected {
                    Modality::Audio => (&mut model.audio, optim_audio),
                    _ => (&mut model.points, optim_points),
                };
                let (loss, grads) = batch_loss(params, &model.temps, &batch)?;
                adamw_step(state, &plan.optimizer, params, &mut model.temps, &grads, lr)?;
                log.push(MetricRecord {
                    step,
                    stage,
                    task,
                    loss,
                    lr,
                    tau_values: model.temps.tau_values(projected),
                });
                step += 1;
                local += 1;
            }
        }
    }
    ckpt.stage = stage;
    Ok(log)
}

/// Runs `stages` in order starting from `ckpt`, returning the checkpoint after each.
pub fn run_stages(
    mut ckpt: Checkpoint,
    stages: &[Stage],
    splits: &Splits,
    bank: &EmbeddingBank,
    plan: &StagePlan,
) -> Result<(Vec<Checkpoint>, Vec<MetricRecord>)> {
    let mut out = Vec::with_capacity(stages.len());
    let mut metrics = Vec::new();
    for &stage in stages {
        metrics.extend(train_stage(&mut ckpt, stage, splits, bank, plan)?);
        out.push(ckpt.clone());
    }
    Ok((out, metrics))
}

/// Training config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default)]
    pub plan: StagePlan,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    /// Embedding files per modality; frozen ones are renormalized on load.
    pub stores: BTreeMap<Modality, PathBuf>,
    #[serde(default)]
    pub split1: Option<PathBuf>,
    #[serde(default)]
    pub split2: Option<PathBuf>,
    #[serde(default)]
    pub split3: Option<PathBuf>,
    pub out_dir: PathBuf,
}

fn default_hidden() -> usize {
    2048
}

impl TrainConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn checkpoint_path(&self, stage: Stage) -> PathBuf {
        self.out_dir.join(format!("stage-{}.ckpt", stage.to_string().to_lowercase()))
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.out_dir.join("metrics.jsonl")
    }

    pub fn load_bank(&self) -> Result<EmbeddingBank> {
        let mut bank = EmbeddingBank::new();
        for (&m, path) in &self.stores {
            let store = if m.is_frozen() {
                load_store_normalized(path)?
            } else {
                load_store(path)?
            };
            if store.modality() != m {
                return Err(Error::Format(format!(
                    "{} holds {} embeddings, configured as {m}",
                    path.display(),
                    store.modality()
                )));
            }
            bank.insert(store)?;
        }
        Ok(bank)
    }

    pub fn load_splits(&self) -> Result<Splits> {
        fn opt<T: serde::de::DeserializeOwned>(p: &Option<PathBuf>) -> Result<Vec<T>> {
            p.as_ref().map_or(Ok(Vec::new()), read_jsonl)
        }
        let s1: Vec<Quintuple> = opt(&self.split1)?;
        let s2: Vec<LabeledPair> = opt(&self.split2)?;
        let s3: Vec<CaptionedPair> = opt(&self.split3)?;
        for lp in &s2 {
            lp.validate()?;
        }
        Ok(Splits { s1, s2, s3 })
    }

    pub fn init_model(&self, bank: &EmbeddingBank) -> Result<BindModel> {
        let out = Modality::FROZEN
            .iter()
            .find_map(|&m| bank.dim(m))
            .ok_or_else(|| Error::InvalidArgument("no frozen embedding store configured".into()))?;
        let dims = |m: Modality| -> Result<ProjectorDims> {
            let input = bank
                .dim(m)
                .ok_or_else(|| Error::InvalidArgument(format!("no {m} embedding store configured")))?;
            Ok(ProjectorDims::new(input, self.hidden, out))
        };
        Ok(BindModel::init(dims(Modality::Audio)?, dims(Modality::Points)?, self.plan.seed))
    }
}

/// Trains from scratch, or from `resume` onwards, writing a checkpoint per stage and the metrics log.
pub fn run_pipeline(cfg: &TrainConfig, resume: Option<Checkpoint>) -> Result<Vec<Checkpoint>> {
    let bank = cfg.load_bank()?;
    let splits = cfg.load_splits()?;
    fs::create_dir_all(&cfg.out_dir)?;
    let mut log = Vec::new();
    let (mut ckpt, stages) = match resume {
        Some(ck) => {
            // keep the log lines of the stages already done
            if cfg.metrics_path().exists() {
                for line in fs::read_to_string(cfg.metrics_path())?.lines().filter(|l| !l.trim().is_empty()) {
                    let rec: MetricRecord = serde_json::from_str(line)?;
                    if rec.stage <= ck.stage {
                        log.extend_from_slice(line.as_bytes());
                        log.push(b'\n');
                    }
                }
            }
            let rest: Vec<Stage> = Stage::ALL.iter().copied().filter(|s| *s > ck.stage).collect();
            (ck, rest)
        }
        None => (Checkpoint::fresh(cfg.init_model(&bank)?, Stage::S1), Stage::ALL.to_vec()),
    };
    let mut out = Vec::new();
    for stage in stages {
        let metrics = train_stage(&mut ckpt, stage, &splits, &bank, &cfg.plan)?;
        write_jsonl_to(&mut log, &metrics)?;
        save_checkpoint(&ckpt, cfg.checkpoint_path(stage))?;
        out.push(ckpt.clone());
    }
    fs::write(cfg.metrics_path(), log)?;
    Ok(out)
}
