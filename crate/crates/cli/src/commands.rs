use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use bindkit::annotate::{
    AnnotationStore, CandidateInput, ConsensusRule, ProjectMode, ProjectSpec, TripleInput,
};
use bindkit::bindnet::{load_checkpoint, BindModel};
use bindkit::curate::{
    build_quintuples, candidate_pairs, greedy_match, select_diverse, CandidateGroup, CandidatePair, Quintuple,
    QuintuplePools,
};
use bindkit::eval::{
    config_hash, eshot_eval, map_report, render_table, retrieval_recall, stamp,
    template_representatives, zeroshot_classify, EvalReport, GroundTruth,
};
use bindkit::jsonl::{read_jsonl, write_jsonl};
use bindkit::simindex::{build_exact, load_hnsw, save_hnsw, HnswConfig, HnswIndex, Index, IndexKind};
use bindkit::store::{load_store, EmbeddingStore};
use bindkit::synth::{corrupt_pairs, gen_world, load_world, CorruptConfig, WorldConfig};
use bindkit::train::{run_pipeline, TrainConfig};
use bindkit::{ItemId, MatchConfig};

use crate::{
    AnnotateCmd, Cli, CliError, CliResult, Command, EvalCmd, ExportKind, HnswArgs, IndexCmd, ModeArg, PairCmd,
    QueryArgs, SynthCmd, TrainCmd, TrainOverrides,
};

pub fn run(cli: &Cli) -> CliResult<()> {
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::Index(c) => index(cli, c, seed),
        Command::Pair(c) => pair(cli, c, seed),
        Command::Annotate(c) => annotate(cli, c, seed),
        Command::Train(c) => train(cli, c),
        Command::Eval(c) => eval(cli, c),
        Command::Synth(c) => synth(cli, c, seed),
        Command::Query(q) => query(cli, q),
    }
}

fn emit<T: Serialize>(cli: &Cli, value: &T, text: impl FnOnce() -> String) -> CliResult<()> {
    if cli.json {
        println!("{}", serde_json::to_string(value)?);
    } else {
        print!("{}", text());
    }
    Ok(())
}

fn hnsw_config(a: &HnswArgs, seed: u64) -> HnswConfig {
    HnswConfig {
        m: a.m,
        ef_construction: a.ef_construction,
        ef_search: a.ef_search,
        seed,
    }
}

fn index_kind(a: &HnswArgs, seed: u64) -> IndexKind {
    if a.hnsw {
        IndexKind::Hnsw(hnsw_config(a, seed))
    } else {
        IndexKind::Exact
    }
}

#[derive(Serialize)]
struct Hit {
    id: String,
    score: f32,
}

#[derive(Serialize)]
struct QueryHits {
    query: String,
    target: String,
    hits: Vec<Hit>,
}

fn hits_text(rows: &[QueryHits]) -> String {
    let mut out = String::new();
    for r in rows {
        out.push_str(&format!("{} -> {}\n", r.query, r.target));
        for (rank, h) in r.hits.iter().enumerate() {
            out.push_str(&format!("  {:>3}  {:<24} {:.4}\n", rank + 1, h.id, h.score));
        }
    }
    out
}

fn search_all(ix: &Index, queries: &EmbeddingStore, k: usize, target: &str) -> CliResult<Vec<QueryHits>> {
    let hits = ix.search(queries, k)?;
    Ok(queries
        .ids()
        .zip(hits)
        .map(|(q, hs)| QueryHits {
            query: q.to_string(),
            target: target.to_string(),
            hits: hs
                .into_iter()
                .map(|h| Hit {
                    id: h.id.to_string(),
                    score: h.score,
                })
                .collect(),
        })
        .collect())
}

fn index(cli: &Cli, cmd: &IndexCmd, seed: u64) -> CliResult<()> {
    match cmd {
        IndexCmd::Build { store, out, hnsw } => {
            let ix = HnswIndex::build(load_store(store)?, hnsw_config(hnsw, seed))?;
            save_hnsw(&ix, out)?;
            let summary = serde_json::json!({"rows": ix.store().count(), "edges": ix.edge_count(), "out": out});
            emit(cli, &summary, || {
                format!("indexed {} rows ({} edges) into {}\n", ix.store().count(), ix.edge_count(), out.display())
            })
        }
        IndexCmd::Search {
            store,
            queries,
            index,
            k,
        } => {
            let store = load_store(store)?;
            let ix = match index {
                Some(p) => Index::Hnsw(load_hnsw(p, store)?),
                None => build_exact(store)?,
            };
            let target = ix.store().modality().to_string();
            let rows = search_all(&ix, &load_store(queries)?, *k, &target)?;
            emit(cli, &rows, || hits_text(&rows))
        }
    }
}

fn pair(cli: &Cli, cmd: &PairCmd, seed: u64) -> CliResult<()> {
    match cmd {
        PairCmd::Quintuples {
            text,
            image,
            video,
            audio,
            points,
            out,
            hnsw,
        } => {
            let [image, video, audio, points] = [image, video, audio, points].map(load_store);
            let (image, video, audio, points) = (image?, video?, audio?, points?);
            let q = build_quintuples(
                &load_store(text)?,
                QuintuplePools {
                    image: &image,
                    video: &video,
                    audio: &audio,
                    points: &points,
                },
                index_kind(hnsw, seed),
            )?;
            write_jsonl(out, &q)?;
            count_line(cli, "quintuples", q.len(), out)
        }
        PairCmd::Candidates {
            captions,
            pool,
            k,
            out,
            hnsw,
        } => {
            let c = candidate_pairs(&load_store(captions)?, &load_store(pool)?, *k, index_kind(hnsw, seed))?;
            write_jsonl(out, &c)?;
            count_line(cli, "candidate pairs", c.len(), out)
        }
        PairCmd::Match {
            candidates,
            k,
            n,
            m_cap,
            per_caption,
            out,
            pairs_out,
        } => {
            let cfg = MatchConfig::new(*k, *n, *m_cap).map_err(|e| CliError::Usage(e.to_string()))?;
            let cands: Vec<CandidatePair> = read_jsonl(candidates)?;
            let matched = greedy_match(&cands, &cfg);
            if let Some(p) = pairs_out {
                write_jsonl(p, &matched.pairs)?;
            }
            let groups = select_diverse(&matched, *per_caption, seed);
            write_jsonl(out, &groups)?;
            count_line(cli, "candidate groups", groups.len(), out)
        }
    }
}

fn count_line(cli: &Cli, what: &str, n: usize, out: &Path) -> CliResult<()> {
    emit(cli, &serde_json::json!({ "count": n, "out": out }), || {
        format!("wrote {n} {what} to {}\n", out.display())
    })
}

fn annotate(cli: &Cli, cmd: &AnnotateCmd, seed: u64) -> CliResult<()> {
    match cmd {
        AnnotateCmd::Create {
            store,
            name,
            mode,
            groups,
            captions,
            pool,
            required_annotators,
        } => {
            let groups: Vec<CandidateGroup> = read_jsonl(groups)?;
            let captions = load_store(captions)?;
            let pool = load_store(pool)?;
            let texts: HashMap<&ItemId, &str> = captions
                .items()
                .iter()
                .map(|r| (&r.id, r.caption.as_deref().unwrap_or("")))
                .collect();
            let uris: HashMap<&ItemId, &str> = pool
                .items()
                .iter()
                .map(|r| (&r.id, r.uri.as_deref().unwrap_or("")))
                .collect();
            let triples = groups
                .iter()
                .map(|g| TripleInput {
                    caption_id: g.caption.clone(),
                    caption_text: texts.get(&g.caption).copied().unwrap_or("").to_string(),
                    caption_class: None,
                    candidates: g
                        .candidates
                        .iter()
                        .map(|c| CandidateInput {
                            id: c.candidate.clone(),
                            uri: uris.get(&c.candidate).copied().unwrap_or("").to_string(),
                            class: None,
                        })
                        .collect(),
                })
                .collect();
            let spec = ProjectSpec {
                name: name.clone(),
                mode: match mode {
                    ModeArg::Split2 => ProjectMode::Split2,
                    ModeArg::Consensus => ProjectMode::Consensus,
                },
                modality: pool.modality(),
                seed,
                required_annotators: *required_annotators,
                triples,
            };
            let info = AnnotationStore::open(store)?.create_project(spec)?;
            emit(cli, &info, || format!("project {} has {} tasks\n", info.name, info.tasks))
        }
        AnnotateCmd::Serve { store, addr } => {
            let store = AnnotationStore::open(store)?;
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
            rt.block_on(bindkit_annotate::serve(*addr, store))?;
            Ok(())
        }
        AnnotateCmd::Export {
            store,
            project,
            kind,
            out,
            required,
        } => {
            let s = AnnotationStore::open(store)?;
            match kind {
                ExportKind::Split2 => {
                    let e = s.export_split2(project)?;
                    write_jsonl(out, &e.pairs)?;
                    emit(cli, &e.verdicts, || {
                        let mut t = format!("wrote {} labeled pairs to {}\n", e.pairs.len(), out.display());
                        for (v, n) in &e.verdicts {
                            t.push_str(&format!("  {:<9} {n}\n", format!("{v:?}").to_lowercase()));
                        }
                        t
                    })
                }
                ExportKind::Consensus => {
                    let pairs = s.export_consensus(
                        project,
                        ConsensusRule {
                            required_annotators: *required,
                        },
                    )?;
                    write_jsonl(out, &pairs)?;
                    count_line(cli, "consensus pairs", pairs.len(), out)
                }
            }
        }
    }
}

fn train_config(cli: &Cli, path: &Path, o: &TrainOverrides) -> CliResult<TrainConfig> {
    let mut cfg = TrainConfig::load(path)?;
    // relative paths in the config resolve against its directory
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let fix = |p: &mut PathBuf| {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    };
    cfg.stores.values_mut().for_each(fix);
    for p in [&mut cfg.split1, &mut cfg.split2, &mut cfg.split3].into_iter().flatten() {
        fix(p);
    }
    fix(&mut cfg.out_dir);
    if let Some(seed) = cli.seed {
        cfg.plan.seed = seed;
    }
    if let Some(b) = o.batch_size {
        cfg.plan.batch_size = b;
    }
    if let Some(e) = o.epochs {
        cfg.plan.epochs = e;
    }
    if let Some(lr) = o.lr {
        cfg.plan.optimizer.lr0 = lr;
    }
    if let Some(h) = o.hidden {
        cfg.hidden = h;
    }
    if let Some(d) = &o.out_dir {
        cfg.out_dir = d.clone();
    }
    if cfg.plan.batch_size < 2 {
        return Err(CliError::Usage("batch size must be at least 2".into()));
    }
    Ok(cfg)
}

fn train(cli: &Cli, cmd: &TrainCmd) -> CliResult<()> {
    let (cfg, resume) = match cmd {
        TrainCmd::Run { config, overrides } => (train_config(cli, config, overrides)?, None),
        TrainCmd::Resume {
            config,
            checkpoint,
            overrides,
        } => (train_config(cli, config, overrides)?, Some(load_checkpoint(checkpoint)?)),
    };
    let done = run_pipeline(&cfg, resume)?;
    let paths: Vec<PathBuf> = done.iter().map(|c| cfg.checkpoint_path(c.stage)).collect();
    emit(cli, &serde_json::json!({ "checkpoints": paths, "metrics": cfg.metrics_path() }), || {
        let mut t = String::new();
        for p in &paths {
            t.push_str(&format!("wrote {}\n", p.display()));
        }
        t.push_str(&format!("metrics in {}\n", cfg.metrics_path().display()));
        t
    })
}

fn load_model(path: &Option<PathBuf>) -> CliResult<Option<BindModel>> {
    Ok(match path {
        Some(p) => Some(load_checkpoint(p)?.model),
        None => None,
    })
}

/// Loads a store and, when a model is given, maps audio/points rows into the bound space.
fn load_bound(path: &Path, model: Option<&BindModel>) -> CliResult<EmbeddingStore> {
    let store = load_store(path)?;
    match model {
        Some(m) if store.modality().is_projected() => Ok(m.project_store(&store)?),
        _ => Ok(store),
    }
}

fn eval_filter(store: EmbeddingStore, eval_only: bool) -> EmbeddingStore {
    if eval_only {
        store.retain_rows(|r| r.is_eval())
    } else {
        store
    }
}

/// Reads `{id, class}` lines (or `{id, concept}` as written by `synth world`).
fn read_classes(path: &Path) -> CliResult<HashMap<ItemId, String>> {
    let rows: Vec<Value> = read_jsonl(path)?;
    let mut out = HashMap::with_capacity(rows.len());
    for row in rows {
        let id: ItemId = row
            .get("id")
            .and_then(Value::as_str)
            .ok_or_else(|| CliError::Usage(format!("{}: every line needs a string id", path.display())))?
            .parse()?;
        let class = match row.get("class").or_else(|| row.get("concept")) {
            Some(Value::String(s)) => s.clone(),
            Some(v @ Value::Number(_)) => v.to_string(),
            _ => return Err(CliError::Usage(format!("{}: line for {id} has no class", path.display()))),
        };
        out.insert(id, class);
    }
    Ok(out)
}

fn classes_of(store: &EmbeddingStore, classes: &HashMap<ItemId, String>) -> CliResult<Vec<String>> {
    store
        .ids()
        .map(|id| {
            classes
                .get(id)
                .cloned()
                .ok_or_else(|| bindkit::Error::ClassCountMismatch(format!("no class for {id}")).into())
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct MapInput {
    scores: Vec<Vec<f64>>,
    labels: Vec<Vec<bool>>,
}

fn eval(cli: &Cli, cmd: &EvalCmd) -> CliResult<()> {
    let (mut reports, out): (Vec<EvalReport>, &Option<PathBuf>) = match cmd {
        EvalCmd::Retrieval {
            queries,
            gallery,
            gt,
            k,
            checkpoint,
            eval_only,
            out,
        } => {
            let model = load_model(checkpoint)?;
            let q = eval_filter(load_bound(queries, model.as_ref())?, *eval_only);
            let g = eval_filter(load_bound(gallery, model.as_ref())?, *eval_only);
            let truth = match gt {
                Some(p) => {
                    #[derive(Deserialize)]
                    struct Row {
                        query: ItemId,
                        target: ItemId,
                    }
                    let mut t = GroundTruth::default();
                    for r in read_jsonl::<Row>(p)? {
                        t.insert(r.query, r.target);
                    }
                    t
                }
                None => GroundTruth::identity(q.ids()),
            };
            let task = format!("{}->{}", q.modality(), g.modality());
            (retrieval_recall(&task, &q, &g, &truth, k)?, out)
        }
        EvalCmd::Zeroshot {
            items,
            item_classes,
            templates,
            template_classes,
            k,
            checkpoint,
            out,
        } => {
            let model = load_model(checkpoint)?;
            let items = load_bound(items, model.as_ref())?;
            let templates = load_bound(templates, model.as_ref())?;
            let t_classes = classes_of(&templates, &read_classes(template_classes)?)?;
            let mut members: BTreeMap<String, Vec<Vec<f32>>> = BTreeMap::new();
            for (i, c) in t_classes.iter().enumerate() {
                members.entry(c.clone()).or_default().push(templates.row(i).to_vec());
            }
            let names: Vec<String> = members.keys().cloned().collect();
            let reps = template_representatives(templates.modality(), &members.into_iter().collect::<Vec<_>>())?;
            let index: HashMap<&String, usize> = names.iter().enumerate().map(|(i, n)| (n, i)).collect();
            let labels = classes_of(&items, &read_classes(item_classes)?)?
                .iter()
                .map(|c| {
                    index
                        .get(c)
                        .copied()
                        .ok_or_else(|| bindkit::Error::ClassCountMismatch(format!("class {c} has no templates")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let task = format!("zeroshot {}", items.modality());
            (zeroshot_classify(&task, &items, &reps, &labels, k)?, out)
        }
        EvalCmd::Map { input, out } => {
            let m: MapInput = serde_json::from_str(&fs::read_to_string(input)?)?;
            (vec![map_report("multilabel", &m.scores, &m.labels)?], out)
        }
        EvalCmd::Eshot {
            audio,
            points,
            audio_classes,
            points_classes,
            checkpoint,
            eval_only,
            out,
        } => {
            let model = load_model(checkpoint)?;
            let a = eval_filter(load_bound(audio, model.as_ref())?, *eval_only);
            let p = eval_filter(load_bound(points, model.as_ref())?, *eval_only);
            let ac = classes_of(&a, &read_classes(audio_classes)?)?;
            let pc = classes_of(&p, &read_classes(points_classes)?)?;
            let names: BTreeSet<&String> = ac.iter().chain(&pc).collect();
            let index: HashMap<&String, usize> = names.into_iter().enumerate().map(|(i, n)| (n, i)).collect();
            let ai: Vec<usize> = ac.iter().map(|c| index[c]).collect();
            let pi: Vec<usize> = pc.iter().map(|c| index[c]).collect();
            (eshot_eval(&a, &ai, &p, &pi)?, out)
        }
    };
    let hash = config_hash(&format!("{:?}", cli.command))?;
    stamp(&mut reports, &hash);
    if let Some(p) = out {
        fs::write(p, serde_json::to_vec_pretty(&reports)?)?;
    }
    emit(cli, &reports, || render_table(&reports))
}

fn synth(cli: &Cli, cmd: &SynthCmd, seed: u64) -> CliResult<()> {
    match cmd {
        SynthCmd::World {
            out,
            concepts,
            dim,
            items,
            heldout,
            sigma,
        } => {
            let cfg = WorldConfig {
                concepts: *concepts,
                dim: *dim,
                items_per_modality: *items,
                heldout: *heldout,
                sigma: *sigma,
                seed,
            };
            gen_world(&cfg)?.save(out)?;
            emit(cli, &cfg, || format!("wrote world to {}\n", out.display()))
        }
        SynthCmd::Corrupt {
            world,
            quintuples,
            fraction,
            partial,
            out_quintuples,
            out_labels,
        } => {
            let w = load_world(world)?;
            let q: Vec<Quintuple> = read_jsonl(quintuples)?;
            let c = corrupt_pairs(
                &q,
                &w,
                &CorruptConfig {
                    fraction: *fraction,
                    partial_fraction: *partial,
                    seed,
                },
            )?;
            write_jsonl(out_quintuples, &c.quintuples)?;
            write_jsonl(out_labels, &c.labels)?;
            let summary = serde_json::json!({"corrupted": c.corrupted, "partial": c.partial, "labels": c.labels.len()});
            emit(cli, &summary, || {
                format!(
                    "corrupted {} slots, {} partial, {} labels\n",
                    c.corrupted,
                    c.partial,
                    c.labels.len()
                )
            })
        }
    }
}

fn query(cli: &Cli, q: &QueryArgs) -> CliResult<()> {
    let model = load_model(&q.checkpoint)?;
    let from = load_store(&q.from)?;
    if from.modality().is_projected() && model.is_none() {
        return Err(CliError::Usage(format!(
            "--checkpoint is required to query from {} embeddings",
            from.modality()
        )));
    }
    let from = match &model {
        Some(m) => m.project_store(&from)?,
        None => from,
    };
    let from = match &q.id {
        Some(id) => {
            let id: ItemId = id.parse()?;
            let row = from
                .id_index()
                .get(&id)
                .copied()
                .ok_or_else(|| CliError::Usage(format!("{id} is not in {}", q.from.display())))?;
            from.select(&[row])
        }
        None => from,
    };
    let mut rows = Vec::new();
    for path in &q.against {
        let target = load_bound(path, model.as_ref())?;
        if target.modality().is_projected() && model.is_none() {
            return Err(CliError::Usage(format!(
                "--checkpoint is required to search {} embeddings",
                target.modality()
            )));
        }
        let label = format!("{} ({})", target.modality(), path.display());
        let ix = build_exact(target)?;
        rows.extend(search_all(&ix, &from, q.k, &label)?);
    }
    rows.sort_by_key(|r| r.query.clone());
    emit(cli, &rows, || hits_text(&rows))
}
