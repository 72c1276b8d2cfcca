use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

use kpe_core::dataset::write_jsonl;
use kpe_core::synthetic::{click_log, generate, SyntheticSpec};

fn kpe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kpe")).args(args).output().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn ok(args: &[&str]) -> String {
    let out = kpe(args);
    assert!(out.status.success(), "kpe {args:?} failed:\n{}\n{}", stdout(&out), stderr(&out));
    stdout(&out)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_lines(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

const SMALL: &[&str] = &[
    "--set",
    "model.filters=16",
    "--set",
    "model.ffn_dim=16",
    "--set",
    "model.embedding.token_dim=16",
    "--set",
    "model.embedding.position_dim=8",
    "--set",
    "data.min_freq=1",
];

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(SMALL);
    v
}

#[test]
fn show_config_prints_defaults_and_digest() {
    let text = ok(&["--show-config"]);
    assert!(text.contains("\"model.filters\": 64"));
    assert!(text.contains("\"training.lr_start\": 0.001"));
    let digest = |t: &str| t.lines().find(|l| l.starts_with("digest: ")).unwrap().to_string();
    let changed = ok(&["--show-config", "--set", "model.filters=32", "--seed", "7"]);
    assert!(changed.contains("\"model.filters\": 32"));
    assert!(changed.contains("\"training.seed\": 7"));
    assert_ne!(digest(&text), digest(&changed));
}

#[test]
fn ablate_flag_toggles_switches() {
    let text = ok(&["--show-config", "--ablate", "no_visual,no_transformer"]);
    assert!(text.contains("\"model.ablation.no_visual\": true"));
    assert!(text.contains("\"model.ablation.no_transformer\": true"));
    assert!(text.contains("\"model.ablation.no_position\": false"));
    let bad = kpe(&["--show-config", "--ablate", "no_colour"]);
    assert!(!bad.status.success());
    assert!(stderr(&bad).contains("no_colour"));
}

#[test]
fn config_file_and_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"model": {"heads": 4}, "training.max_epochs": 3}"#).unwrap();
    let text = ok(&["--config", p(&cfg), "--show-config", "--set", "training.max_epochs=5"]);
    assert!(text.contains("\"model.heads\": 4"));
    assert!(text.contains("\"training.max_epochs\": 5"));

    let unknown_key = kpe(&["--show-config", "--set", "model.filterz=3"]);
    assert!(!unknown_key.status.success());
    assert!(stderr(&unknown_key).contains("model.filterz"));

    let unknown_flag = kpe(&["evaluate", "--bogus"]);
    assert!(!unknown_flag.status.success());

    let missing = kpe(&["evaluate", "--preds", "/nonexistent/p.jsonl", "--gold", "/nonexistent/g.jsonl"]);
    assert!(!missing.status.success());
    assert!(stderr(&missing).contains("/nonexistent/"));

    let schema = dir.path().join("bad.jsonl");
    fs::write(&schema, "{\"id\": \"a\"}\n").unwrap();
    let out = kpe(&["baseline", "--method", "tfidf", "--data", p(&schema), "--out", p(&dir.path().join("o.jsonl"))]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("line 1"), "{}", stderr(&out));
}

#[test]
fn evaluate_perfect_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let gold = dir.path().join("gold.jsonl");
    let preds = dir.path().join("preds.jsonl");
    fs::write(
        &gold,
        "{\"id\":\"a\",\"text\":\"x y z w\",\"keyphrases\":[\"x\",\"y z\",\"w\"]}\n{\"id\":\"b\",\"text\":\"p q r\",\"keyphrases\":[\"p\",\"q\",\"r\"]}\n",
    )
    .unwrap();
    fs::write(
        &preds,
        "{\"id\":\"a\",\"phrases\":[[\"x\",0.5],[\"y z\",0.3],[\"w\",0.2]]}\n{\"id\":\"b\",\"phrases\":[[\"p\",0.5],[\"q\",0.3],[\"r\",0.2]]}\n",
    )
    .unwrap();
    let report = dir.path().join("report.json");
    let text = ok(&["evaluate", "--preds", p(&preds), "--gold", p(&gold), "--depths", "3", "--f1", "3", "--out", p(&report)]);
    let row = text.lines().find(|l| l.starts_with("@3")).unwrap();
    assert_eq!(row.split_whitespace().collect::<Vec<_>>(), ["@3", "1.0000", "1.0000"]);
    let json: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["metrics"]["f1"], 1.0);
    assert!(json["provenance"]["config_digest"].as_str().unwrap().len() == 64);
}

#[test]
fn agreement_partial_overlap() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("judges.jsonl");
    fs::write(&path, "{\"id\":\"u\",\"judges\":[[\"x\",\"y\",\"z\"],[\"x\",\"w\",\"z\"]]}\n").unwrap();
    let report: Value = serde_json::from_str(&ok(&["agreement", "--annotations", p(&path), "--depth", "3"])).unwrap();
    assert!((report["percent"].as_f64().unwrap() - 66.67).abs() < 0.01);
    let unigram: Value =
        serde_json::from_str(&ok(&["agreement", "--annotations", p(&path), "--mode", "unigram"])).unwrap();
    assert_eq!(unigram["pairs"], 1);
}

#[test]
fn gradcheck_passes_on_desk_config() {
    let text = ok(&["gradcheck"]);
    let last = text.lines().last().unwrap();
    assert!(last.starts_with("max rel err") && last.contains("< 1e-4"), "{last}");
}

#[test]
fn featurize_layout_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    let layouts = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/layouts");
    let out = dir.path().join("data.jsonl");
    ok(&["featurize", "--layout-dir", p(&layouts), "--out", p(&out)]);
    let records = read_lines(&out);
    assert_eq!(records.len(), 2);
    assert_eq!(records[1]["id"], "stapler");
    assert_eq!(records[1]["visual"].as_array().unwrap().len(), 6);
    let meta: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("data.jsonl.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["command"], "featurize");
}

fn write_corpus(dir: &Path) -> (PathBuf, PathBuf, PathBuf, PathBuf) {
    let base = SyntheticSpec {
        min_phrase: 2,
        max_phrase: 2,
        ..SyntheticSpec::default()
    };
    let pool = generate(&SyntheticSpec {
        documents: 24,
        id_prefix: "pool".into(),
        ..base.clone()
    });
    let labeled = generate(&SyntheticSpec {
        documents: 12,
        id_prefix: "kp".into(),
        seed: 1,
        ..base.clone()
    });
    let test = generate(&SyntheticSpec {
        documents: 6,
        id_prefix: "test".into(),
        seed: 2,
        min_len: 300,
        max_len: 400,
        ..base
    });
    let unlabeled: Vec<_> = pool
        .iter()
        .map(|r| kpe_core::dataset::DatasetRecord {
            keyphrases: None,
            ..r.clone()
        })
        .collect();
    let paths = (
        dir.join("pool.jsonl"),
        dir.join("clicks.jsonl"),
        dir.join("kp.jsonl"),
        dir.join("test.jsonl"),
    );
    write_jsonl(&paths.0, &unlabeled).unwrap();
    write_jsonl(&paths.1, &click_log(&pool, 3)).unwrap();
    write_jsonl(&paths.2, &labeled).unwrap();
    write_jsonl(&paths.3, &test).unwrap();
    (paths.0, paths.1, paths.2, paths.3)
}

#[test]
fn pretrain_finetune_predict_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (pool, clicks, kp, test) = write_corpus(d);

    let qp = d.join("qp.jsonl");
    let stats: Value = serde_json::from_str(&ok(&["build-qp", "--docs", p(&pool), "--clicks", p(&clicks), "--out", p(&qp)])).unwrap();
    assert_eq!(stats["# of Documents"], 24);
    assert_eq!(stats["queries_unmatched"], 24);
    assert_eq!(read_lines(&qp)[0]["source"], "click_queries");

    let run = d.join("run");
    ok(&with_small(&["pretrain", "--data", p(&qp), "--out", p(&run), "--set", "training.max_epochs=2", "--seed", "4"]));
    for name in ["config.json", "metrics.jsonl", "epoch-1.ckpt", "epoch-2.ckpt", "best.ckpt", "summary.json"] {
        assert!(run.join(name).is_file(), "missing {name}");
    }
    assert_eq!(read_lines(&run.join("metrics.jsonl")).len(), 2);
    let config: Value = serde_json::from_str(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(config["command"], "pretrain");
    assert_eq!(config["seed"], 4);
    assert_eq!(config["config_digest"].as_str().unwrap().len(), 64);

    let run2 = d.join("run2");
    let init = run.join("best");
    ok(&["train", "--data", p(&kp), "--init", p(&init), "--out", p(&run2), "--set", "training.max_epochs=2"]);
    assert!(run2.join("best.ckpt").is_file());

    let preds = d.join("preds.jsonl");
    ok(&["predict", "--model", p(&run2.join("best")), "--data", p(&test), "--chunked", "--top-k", "5", "--out", p(&preds)]);
    let lines = read_lines(&preds);
    assert_eq!(lines.len(), 6);
    for line in &lines {
        let phrases = line["phrases"].as_array().unwrap();
        assert_eq!(phrases.len(), 5);
        let scores: Vec<f64> = phrases.iter().map(|x| x[1].as_f64().unwrap()).collect();
        assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    }

    let plain = d.join("plain.jsonl");
    ok(&["predict", "--model", p(&run2), "--data", p(&test), "--out", p(&plain)]);
    let tfidf = d.join("tfidf.jsonl");
    ok(&["baseline", "--method", "tfidf", "--data", p(&test), "--corpus", p(&kp), "--out", p(&tfidf)]);
    let textrank = d.join("textrank.jsonl");
    ok(&["baseline", "--method", "textrank", "--data", p(&test), "--out", p(&textrank)]);
    assert_eq!(read_lines(&textrank).len(), 6);

    let text = ok(&["evaluate", "--preds", p(&preds), "--gold", p(&test), "--compare", p(&tfidf)]);
    assert!(text.contains("F1@10"));
    assert!(text.contains("p = "), "{text}");
}

#[test]
fn deterministic_training_given_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (_, _, kp, _) = write_corpus(d);
    let mut digests = Vec::new();
    for (name, threads) in [("a", "1"), ("b", "2")] {
        let run = d.join(name);
        ok(&with_small(&["train", "--data", p(&kp), "--out", p(&run), "--set", "training.max_epochs=1", "--threads", threads]));
        digests.push(fs::read(run.join("best.ckpt")).unwrap());
    }
    assert_eq!(digests[0], digests[1]);
}
