use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bindkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bindkit"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = bindkit(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_world(dir: &Path, seed: &str) {
    ok(&[
        "synth", "world", "--out", p(dir), "--concepts", "4", "--dim", "8", "--items", "64", "--heldout", "32",
        "--seed", seed,
    ]);
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    let out = bindkit(&["eval", "retrieval", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
    assert_eq!(bindkit(&["--help"]).status.code(), Some(0));
    assert_eq!(bindkit(&[]).status.code(), Some(1));
    let out = bindkit(&["pair", "match", "--candidates", "x", "--out", "y", "--k", "1", "--n", "3"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_two() {
    let out = bindkit(&["eval", "retrieval", "--queries", "/nonexistent.emb", "--gallery", "/nonexistent.emb"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn identity_retrieval_prints_perfect_recall() {
    let dir = tempfile::tempdir().unwrap();
    small_world(dir.path(), "1");
    let text = dir.path().join("text.emb");
    let table = ok(&["eval", "retrieval", "--queries", p(&text), "--gallery", p(&text), "--k", "1,5"]);
    assert!(table.contains("R@1") && table.contains("1.0000"), "{table}");
    let out = ok(&["--json", "eval", "retrieval", "--queries", p(&text), "--gallery", p(&text), "--k", "1"]);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v[0]["metric"], "R@k");
    assert_eq!(v[0]["k"], 1);
    assert_eq!(v[0]["value"], 1.0);
    assert_eq!(v[0]["config_hash"].as_str().unwrap().len(), 16);
}

#[test]
fn synth_world_is_deterministic_per_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    small_world(a.path(), "5");
    small_world(b.path(), "5");
    small_world(c.path(), "6");
    let read = |d: &Path| fs::read(d.join("audio.emb")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    assert_ne!(read(a.path()), read(c.path()));
}

fn write_config(dir: &Path, splits: &[(&str, &str)], out: &str) -> std::path::PathBuf {
    let mut cfg = json!({
        "plan": {"batch_size": 16, "epochs": 1, "seed": 3},
        "hidden": 16,
        "stores": {
            "text": "w/text.emb", "image": "w/image.emb", "video": "w/video.emb",
            "audio": "w/audio.emb", "points": "w/points.emb"
        },
        "out_dir": out,
    });
    for (k, v) in splits {
        cfg[*k] = json!(v);
    }
    let path = dir.join(format!("{out}.json"));
    fs::write(&path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn train_on_empty_manifests_gives_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    small_world(&dir.path().join("w"), "2");
    for name in ["s1.jsonl", "s2.jsonl", "s3.jsonl"] {
        fs::write(dir.path().join(name), "").unwrap();
    }
    let cfg = write_config(
        dir.path(),
        &[("split1", "s1.jsonl"), ("split2", "s2.jsonl"), ("split3", "s3.jsonl")],
        "out",
    );
    ok(&["train", "run", "--config", p(&cfg)]);
    let read = |s: &str| {
        let mut b = fs::read(dir.path().join("out").join(format!("stage-{s}.ckpt"))).unwrap();
        assert_eq!(b[6], s[1..].parse::<u8>().unwrap());
        b[6] = 0;
        // checksum covers the stage byte
        b.truncate(b.len() - 32);
        b
    };
    assert_eq!(read("s1"), read("s2"));
    assert_eq!(read("s2"), read("s3"));
    assert_eq!(fs::read_to_string(dir.path().join("out/metrics.jsonl")).unwrap(), "");
}

#[test]
fn synthetic_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let w = d.join("w");
    small_world(&w, "4");
    let q = d.join("q.jsonl");
    ok(&[
        "pair", "quintuples", "--text", p(&w.join("text.emb")), "--image", p(&w.join("image.emb")),
        "--video", p(&w.join("video.emb")), "--audio", p(&w.join("audio.retrieval.emb")),
        "--points", p(&w.join("points.retrieval.emb")), "--out", p(&q),
    ]);
    assert_eq!(fs::read_to_string(&q).unwrap().lines().count(), 64);
    let (cq, labels) = (d.join("cq.jsonl"), d.join("labels.jsonl"));
    let out = ok(&[
        "--json", "synth", "corrupt", "--world", p(&w), "--quintuples", p(&q), "--fraction", "0.25",
        "--out-quintuples", p(&cq), "--out-labels", p(&labels),
    ]);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["labels"], 128);
    let cfg = write_config(d, &[("split1", "cq.jsonl"), ("split2", "labels.jsonl")], "run");
    let out = ok(&["--json", "train", "run", "--config", p(&cfg), "--epochs", "2"]);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["checkpoints"].as_array().unwrap().len(), 3);
    let metrics = fs::read_to_string(d.join("run/metrics.jsonl")).unwrap();
    // S1: 4 tasks x 2 epochs x 4 batches per projector; S2: 2 epochs x 4 batches per projector
    assert_eq!(metrics.lines().count(), 2 * (32 + 8));

    // resuming from S1 reproduces S2 and S3 byte for byte
    let cfg2 = write_config(d, &[("split1", "cq.jsonl"), ("split2", "labels.jsonl")], "run2");
    ok(&[
        "train", "resume", "--config", p(&cfg2), "--epochs", "2", "--checkpoint", p(&d.join("run/stage-s1.ckpt")),
    ]);
    for s in ["s2", "s3"] {
        assert_eq!(
            fs::read(d.join(format!("run/stage-{s}.ckpt"))).unwrap(),
            fs::read(d.join(format!("run2/stage-{s}.ckpt"))).unwrap()
        );
    }

    let ck = d.join("run/stage-s3.ckpt");
    let out = ok(&[
        "--json", "eval", "retrieval", "--queries", p(&w.join("audio.emb")), "--gallery", p(&w.join("text.emb")),
        "--checkpoint", p(&ck), "--eval-only", "--k", "1,5,10",
    ]);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 3);
    assert_eq!(v[0]["support"], 32);
    let assign = w.join("assignments.jsonl");
    let out = ok(&[
        "--json", "eval", "eshot", "--audio", p(&w.join("audio.emb")), "--points", p(&w.join("points.emb")),
        "--audio-classes", p(&assign), "--points-classes", p(&assign), "--checkpoint", p(&ck), "--eval-only",
    ]);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 6);
    let out = ok(&[
        "--json", "query", "--from", p(&w.join("audio.emb")), "--id", "heldout/0", "--against",
        &format!("{},{}", p(&w.join("text.emb")), p(&w.join("points.emb"))), "--k", "3", "--checkpoint", p(&ck),
    ]);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 2);
    assert!(v.as_array().unwrap().iter().all(|r| r["hits"].as_array().unwrap().len() == 3));
    let out = bindkit(&["query", "--from", p(&w.join("audio.emb")), "--against", p(&w.join("text.emb"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn curation_to_annotation_export() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let w = d.join("w");
    small_world(&w, "7");
    let (cands, groups) = (d.join("cands.jsonl"), d.join("groups.jsonl"));
    ok(&[
        "pair", "candidates", "--captions", p(&w.join("text.emb")), "--pool", p(&w.join("audio.retrieval.emb")),
        "--k", "8", "--out", p(&cands),
    ]);
    ok(&[
        "pair", "match", "--candidates", p(&cands), "--k", "8", "--n", "3", "--m-cap", "3", "--out", p(&groups),
    ]);
    let n_groups = fs::read_to_string(&groups).unwrap().lines().count();
    assert!(n_groups > 0);
    let store = d.join("labels");
    let out = ok(&[
        "--json", "annotate", "create", "--store", p(&store), "--name", "audio-v1", "--groups", p(&groups),
        "--captions", p(&w.join("text.emb")), "--pool", p(&w.join("audio.emb")),
    ]);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["tasks"], n_groups);
    assert_eq!(v["modality"], "audio");
    let export = d.join("split2.jsonl");
    let out = ok(&[
        "--json", "annotate", "export", "--store", p(&store), "--project", "audio-v1", "--out", p(&export),
    ]);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["positive"], 0);
    assert_eq!(fs::read_to_string(&export).unwrap(), "");
    let out = bindkit(&[
        "annotate", "export", "--store", p(&store), "--project", "missing", "--out", p(&export),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn hnsw_index_build_and_search() {
    let dir = tempfile::tempdir().unwrap();
    small_world(dir.path(), "8");
    let text = dir.path().join("text.emb");
    let ix = dir.path().join("text.hnsw");
    ok(&["index", "build", "--store", p(&text), "--out", p(&ix), "--m", "8"]);
    let out = ok(&["--json", "index", "search", "--store", p(&text), "--queries", p(&text), "--index", p(&ix), "--k", "1"]);
    let v: Value = serde_json::from_str(&out).unwrap();
    let rows = v.as_array().unwrap();
    assert_eq!(rows.len(), 96);
    assert!(rows.iter().all(|r| r["hits"][0]["id"] == r["query"]));
}

#[test]
fn map_from_matrix_file() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("m.json");
    fs::write(&input, r#"{"scores": [[0.9], [0.1]], "labels": [[false], [true]]}"#).unwrap();
    let out = ok(&["--json", "eval", "map", "--input", p(&input)]);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v[0]["metric"], "mAP");
    assert_eq!(v[0]["value"], 0.5);
}

#[test]
fn zeroshot_with_templates() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path();
    small_world(w, "9");
    // text training items as templates, grouped by concept; held-out text as items
    let assign = w.join("assignments.jsonl");
    let text = w.join("text.emb");
    let out = ok(&[
        "--json", "eval", "zeroshot", "--items", p(&text), "--item-classes", p(&assign), "--templates", p(&text),
        "--template-classes", p(&assign), "--k", "1,4",
    ]);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert!(v[0]["value"].as_f64().unwrap() > 0.9);
    assert_eq!(v[1]["value"], 1.0);
}
