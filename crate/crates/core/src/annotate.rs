//! Human verification projects: task serving with leases, an append-only
//! label log, Split-2 label export and unanimous-consensus export.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::jsonl::read_jsonl_from;
use crate::train::LabeledPair;
use crate::types::{ItemId, Modality};

pub const LEASE_MS: u64 = 30 * 60 * 1000;
pub const CANDIDATES_PER_TASK: usize = 3;
pub const CONSENSUS_ANNOTATORS: usize = 3;

const PROJECTS_FILE: &str = "projects.jsonl";
const LABELS_FILE: &str = "labels.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Positive,
    Partial,
    Negative,
}

impl Verdict {
    pub const ALL: [Verdict; 3] = [Verdict::Positive, Verdict::Partial, Verdict::Negative];

    pub fn p(self) -> f64 {
        match self {
            Verdict::Positive => 1.0,
            Verdict::Partial => 0.5,
            Verdict::Negative => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectMode {
    /// Training labels; each task wants `required_annotators` annotators (default 1).
    Split2,
    /// Benchmark construction; tasks are served until three annotators have labeled them.
    Consensus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateInput {
    pub id: ItemId,
    #[serde(default)]
    pub uri: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripleInput {
    pub caption_id: ItemId,
    #[serde(default)]
    pub caption_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption_class: Option<String>,
    pub candidates: Vec<CandidateInput>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectSpec {
    pub name: String,
    pub mode: ProjectMode,
    /// Modality of the candidates.
    pub modality: Modality,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub required_annotators: Option<usize>,
    #[serde(default)]
    pub triples: Vec<TripleInput>,
}

impl ProjectSpec {
    pub fn required(&self) -> usize {
        self.required_annotators.unwrap_or(match self.mode {
            ProjectMode::Split2 => 1,
            ProjectMode::Consensus => CONSENSUS_ANNOTATORS,
        })
    }

    pub fn input_hash(&self) -> Result<String> {
        let digest = Sha256::digest(serde_json::to_vec(self)?);
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains('/') || self.name.contains(':') {
            return Err(Error::InvalidArgument(format!("bad project name {:?}", self.name)));
        }
        if self.required() == 0 {
            return Err(Error::InvalidArgument("required_annotators must be >= 1".into()));
        }
        for (i, t) in self.triples.iter().enumerate() {
            if t.candidates.len() != CANDIDATES_PER_TASK {
                return Err(Error::InvalidArgument(format!(
                    "triple {i} has {} candidates, expected {CANDIDATES_PER_TASK}",
                    t.candidates.len()
                )));
            }
            let ids: BTreeSet<&ItemId> = t.candidates.iter().map(|c| &c.id).collect();
            if ids.len() != CANDIDATES_PER_TASK {
                return Err(Error::InvalidArgument(format!("triple {i} repeats a candidate")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskCandidate {
    pub id: ItemId,
    pub uri: String,
}

/// A task as served to an annotator; candidates are in display order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub task_id: String,
    pub project: String,
    pub caption_id: ItemId,
    pub caption_text: String,
    pub candidates: Vec<TaskCandidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationLabel {
    pub task_id: String,
    pub candidate_id: ItemId,
    pub verdict: Verdict,
    pub annotator_id: String,
    /// UTC milliseconds; filled in on submission when zero.
    #[serde(default)]
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectInfo {
    pub name: String,
    pub mode: ProjectMode,
    pub modality: Modality,
    pub required_annotators: usize,
    pub tasks: usize,
    pub labels: usize,
    pub input_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split2Export {
    pub pairs: Vec<LabeledPair>,
    pub verdicts: BTreeMap<Verdict, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusPair {
    pub caption_id: ItemId,
    pub candidate_id: ItemId,
    pub modality: Modality,
    pub annotators: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption_class: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate_class: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsensusRule {
    pub required_annotators: usize,
}

impl Default for ConsensusRule {
    fn default() -> Self {
        Self {
            required_annotators: CONSENSUS_ANNOTATORS,
        }
    }
}

#[derive(Debug, Clone)]
struct Task {
    input: TripleInput,
    /// Indices into `input.candidates`, display order.
    order: Vec<usize>,
}

#[derive(Debug, Clone)]
struct Project {
    spec: ProjectSpec,
    hash: String,
    tasks: Vec<Task>,
    labels: usize,
}

fn task_id(project: &str, i: usize) -> String {
    format!("{project}:{i}")
}

fn build_tasks(spec: &ProjectSpec) -> Vec<Task> {
    spec.triples
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            let mut order: Vec<usize> = (0..t.candidates.len()).collect();
            order.shuffle(&mut rng);
            Task {
                input: t.clone(),
                order,
            }
        })
        .collect()
}

type LabelKey = (String, ItemId, String);

struct Logs {
    projects: File,
    labels: File,
}

fn append_lines<T: Serialize>(file: &mut File, records: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    file.write_all(&buf)?;
    file.sync_data()?;
    Ok(())
}

/// All projects, tasks, leases and labels. Optionally backed by a directory
/// holding append-only project and label logs.
#[derive(Default)]
pub struct AnnotationStore {
    projects: BTreeMap<String, Project>,
    labels: Vec<AnnotationLabel>,
    keys: HashMap<LabelKey, Verdict>,
    /// Distinct annotators with at least one label, per task.
    annotators: HashMap<String, BTreeSet<String>>,
    /// Labeled candidate count per (task, annotator).
    progress: HashMap<(String, String), usize>,
    leases: HashMap<(String, String), u64>,
    logs: Option<Logs>,
    dir: Option<PathBuf>,
}

impl AnnotationStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) a store directory and replays its logs.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut store = Self::default();
        let open = |name: &str| OpenOptions::new().create(true).read(true).append(true).open(dir.join(name));
        let projects = open(PROJECTS_FILE)?;
        let labels = open(LABELS_FILE)?;
        let specs: Vec<ProjectSpec> = read_jsonl_from(BufReader::new(File::open(dir.join(PROJECTS_FILE))?))?;
        for spec in specs {
            store.insert_project(spec)?;
        }
        let logged: Vec<AnnotationLabel> = read_jsonl_from(BufReader::new(File::open(dir.join(LABELS_FILE))?))?;
        for label in logged {
            store.locate(&label)?;
            store.apply(label);
        }
        store.logs = Some(Logs { projects, labels });
        store.dir = Some(dir.to_path_buf());
        Ok(store)
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    fn insert_project(&mut self, spec: ProjectSpec) -> Result<()> {
        spec.validate()?;
        let hash = spec.input_hash()?;
        let tasks = build_tasks(&spec);
        self.projects.insert(
            spec.name.clone(),
            Project {
                spec,
                hash,
                tasks,
                labels: 0,
            },
        );
        Ok(())
    }

    /// Creates a project; re-creating with identical inputs returns the existing one.
    pub fn create_project(&mut self, spec: ProjectSpec) -> Result<ProjectInfo> {
        spec.validate()?;
        if let Some(existing) = self.projects.get(&spec.name) {
            if existing.hash == spec.input_hash()? {
                return self.project_info(&spec.name);
            }
            return Err(Error::DuplicateProject(spec.name));
        }
        if let Some(logs) = self.logs.as_mut() {
            append_lines(&mut logs.projects, std::slice::from_ref(&spec))?;
        }
        let name = spec.name.clone();
        self.insert_project(spec)?;
        self.project_info(&name)
    }

    fn project(&self, name: &str) -> Result<&Project> {
        self.projects.get(name).ok_or_else(|| Error::UnknownProject(name.to_string()))
    }

    pub fn project_info(&self, name: &str) -> Result<ProjectInfo> {
        let p = self.project(name)?;
        Ok(ProjectInfo {
            name: p.spec.name.clone(),
            mode: p.spec.mode,
            modality: p.spec.modality,
            required_annotators: p.spec.required(),
            tasks: p.tasks.len(),
            labels: p.labels,
            input_hash: p.hash.clone(),
        })
    }

    pub fn projects(&self) -> Vec<ProjectInfo> {
        self.projects
            .keys()
            .map(|n| self.project_info(n).expect("listed project exists"))
            .collect()
    }

    fn served(&self, project: &Project, i: usize) -> AnnotationTask {
        let t = &project.tasks[i];
        AnnotationTask {
            task_id: task_id(&project.spec.name, i),
            project: project.spec.name.clone(),
            caption_id: t.input.caption_id.clone(),
            caption_text: t.input.caption_text.clone(),
            candidates: t
                .order
                .iter()
                .map(|&c| TaskCandidate {
                    id: t.input.candidates[c].id.clone(),
                    uri: t.input.candidates[c].uri.clone(),
                })
                .collect(),
        }
    }

    /// Up to `limit` tasks the annotator still has to label, leasing each for 30 minutes.
    pub fn next_tasks(&mut self, project: &str, annotator: &str, limit: usize, now: u64) -> Result<Vec<AnnotationTask>> {
        self.leases.retain(|_, &mut expiry| expiry > now);
        let p = self.project(project)?;
        let cap = p.spec.required();
        let mut picked = Vec::new();
        for i in 0..p.tasks.len() {
            if picked.len() == limit {
                break;
            }
            let tid = task_id(project, i);
            let key = (tid.clone(), annotator.to_string());
            if self.progress.get(&key).copied().unwrap_or(0) >= CANDIDATES_PER_TASK || self.leases.contains_key(&key) {
                continue;
            }
            let labeled = self.annotators.get(&tid);
            let already = labeled.is_some_and(|s| s.contains(annotator));
            if !already {
                let mut holders: BTreeSet<&str> = labeled.map(|s| s.iter().map(String::as_str).collect()).unwrap_or_default();
                holders.extend(
                    self.leases
                        .keys()
                        .filter(|(t, a)| *t == tid && a != annotator)
                        .map(|(_, a)| a.as_str()),
                );
                if holders.len() >= cap {
                    continue;
                }
            }
            picked.push(i);
        }
        let p = self.project(project)?;
        let out: Vec<AnnotationTask> = picked.iter().map(|&i| self.served(p, i)).collect();
        for t in &out {
            self.leases.insert((t.task_id.clone(), annotator.to_string()), now + LEASE_MS);
        }
        Ok(out)
    }

    fn locate(&self, label: &AnnotationLabel) -> Result<(&Project, usize)> {
        let unknown = || Error::UnknownTask(label.task_id.clone());
        let (name, idx) = label.task_id.rsplit_once(':').ok_or_else(unknown)?;
        let idx: usize = idx.parse().map_err(|_| unknown())?;
        let project = self.projects.get(name).ok_or_else(unknown)?;
        let task = project.tasks.get(idx).ok_or_else(unknown)?;
        if !task.input.candidates.iter().any(|c| c.id == label.candidate_id) {
            return Err(Error::ForeignCandidate {
                task: label.task_id.clone(),
                candidate: label.candidate_id.clone(),
            });
        }
        Ok((project, idx))
    }

    fn apply(&mut self, label: AnnotationLabel) {
        let (name, _) = label.task_id.rsplit_once(':').expect("located");
        if let Some(p) = self.projects.get_mut(name) {
            p.labels += 1;
        }
        self.keys.insert(
            (label.task_id.clone(), label.candidate_id.clone(), label.annotator_id.clone()),
            label.verdict,
        );
        self.annotators
            .entry(label.task_id.clone())
            .or_default()
            .insert(label.annotator_id.clone());
        *self
            .progress
            .entry((label.task_id.clone(), label.annotator_id.clone()))
            .or_default() += 1;
        self.labels.push(label);
    }

    /// Validates the whole batch, then appends the new labels to the log.
    /// Exact resubmissions are skipped; returns how many labels were new.
    pub fn submit_labels(&mut self, labels: Vec<AnnotationLabel>, now: u64) -> Result<usize> {
        let mut fresh: Vec<AnnotationLabel> = Vec::new();
        let mut batch: HashMap<LabelKey, Verdict> = HashMap::new();
        let mut added: HashMap<String, BTreeSet<String>> = HashMap::new();
        for mut label in labels {
            if label.annotator_id.is_empty() {
                return Err(Error::InvalidArgument("empty annotator_id".into()));
            }
            let (project, _) = self.locate(&label)?;
            let cap = project.spec.required();
            let key = (label.task_id.clone(), label.candidate_id.clone(), label.annotator_id.clone());
            match self.keys.get(&key).or_else(|| batch.get(&key)) {
                Some(&v) if v == label.verdict => continue,
                Some(_) => {
                    return Err(Error::DuplicateLabel {
                        task: key.0,
                        candidate: key.1,
                        annotator: key.2,
                    })
                }
                None => {}
            }
            let existing = self.annotators.get(&label.task_id);
            if !existing.is_some_and(|s| s.contains(&label.annotator_id)) {
                let extra = added.entry(label.task_id.clone()).or_default();
                extra.insert(label.annotator_id.clone());
                if existing.map_or(0, BTreeSet::len) + extra.len() > cap {
                    return Err(Error::TaskSaturated(label.task_id.clone()));
                }
            }
            if label.timestamp == 0 {
                label.timestamp = now;
            }
            batch.insert(key, label.verdict);
            fresh.push(label);
        }
        if let Some(logs) = self.logs.as_mut() {
            append_lines(&mut logs.labels, &fresh)?;
        }
        let n = fresh.len();
        for label in fresh {
            self.leases.remove(&(label.task_id.clone(), label.annotator_id.clone()));
            self.apply(label);
        }
        Ok(n)
    }

    /// Every label of a project in log order.
    pub fn labels(&self, project: &str) -> Result<Vec<&AnnotationLabel>> {
        self.project(project)?;
        let prefix = format!("{project}:");
        Ok(self
            .labels
            .iter()
            .filter(|l| l.task_id.strip_prefix(&prefix).is_some_and(|r| !r.contains(':')))
            .collect())
    }

    /// Minimum p per (caption, candidate) over all annotators, plus the verdict histogram.
    pub fn export_split2(&self, project: &str) -> Result<Split2Export> {
        let p = self.project(project)?;
        let mut pairs: BTreeMap<(ItemId, ItemId), f64> = BTreeMap::new();
        let mut verdicts: BTreeMap<Verdict, usize> = Verdict::ALL.iter().map(|&v| (v, 0)).collect();
        for label in self.labels(project)? {
            let (_, idx) = self.locate(label)?;
            let caption = p.tasks[idx].input.caption_id.clone();
            let e = pairs.entry((caption, label.candidate_id.clone())).or_insert(f64::INFINITY);
            *e = e.min(label.verdict.p());
            *verdicts.entry(label.verdict).or_default() += 1;
        }
        Ok(Split2Export {
            pairs: pairs
                .into_iter()
                .map(|((caption_id, candidate_id), p_min)| LabeledPair {
                    caption_id,
                    candidate_id,
                    modality: p.spec.modality,
                    p: p_min,
                })
                .collect(),
            verdicts,
        })
    }

    /// Pairs labeled positive by every one of at least `rule.required_annotators` annotators.
    pub fn export_consensus(&self, project: &str, rule: ConsensusRule) -> Result<Vec<ConsensusPair>> {
        let p = self.project(project)?;
        let mut seen: BTreeMap<(usize, ItemId), (BTreeSet<&str>, bool)> = BTreeMap::new();
        for label in self.labels(project)? {
            let (_, idx) = self.locate(label)?;
            let e = seen
                .entry((idx, label.candidate_id.clone()))
                .or_insert_with(|| (BTreeSet::new(), true));
            e.0.insert(&label.annotator_id);
            e.1 &= label.verdict == Verdict::Positive;
        }
        let mut out: Vec<ConsensusPair> = seen
            .into_iter()
            .filter(|(_, (who, all_pos))| *all_pos && who.len() >= rule.required_annotators)
            .map(|((idx, cand), (who, _))| {
                let input = &p.tasks[idx].input;
                let candidate_class = input.candidates.iter().find(|c| c.id == cand).and_then(|c| c.class.clone());
                ConsensusPair {
                    caption_id: input.caption_id.clone(),
                    candidate_id: cand,
                    modality: p.spec.modality,
                    annotators: who.len(),
                    caption_class: input.caption_class.clone(),
                    candidate_class,
                }
            })
            .collect();
        out.sort_by(|a, b| (&a.caption_id, &a.candidate_id).cmp(&(&b.caption_id, &b.candidate_id)));
        out.dedup_by(|a, b| a.caption_id == b.caption_id && a.candidate_id == b.candidate_id);
        Ok(out)
    }
}
