mod common;

use std::fs;
use std::path::Path;

use common::*;
use hybridrec_cli::manifest::RunManifest;
use hybridrec_cli::pipeline::{EvalOutput, LABELED_ARTICLES, METRICS_CSV, METRICS_JSON};
use hybridrec_core::corpus::{parse_articles, ArticleFormat, Locality};

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("experiment.toml");
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn outputs(dir: &Path) -> Vec<(String, String)> {
    let m = RunManifest::load(dir).unwrap().unwrap();
    m.stages
        .values()
        .flat_map(|s| s.outputs.iter().map(|(a, b)| (a.clone(), b.clone())))
        .collect()
}

#[test]
fn full_run_emits_six_row_table_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let cfg = write_config(tmp.path(), &tiny_synthetic_config(&a, 5, 4000));
    let first = hybridrec(&["run", "--config", &cfg, "--quiet"]);
    assert!(first.status.success(), "{}", stderr(&first));
    let table = stdout(&first);
    for row in [
        "SKNN (Global)",
        "SASRec (Global)",
        "SKNN + Ensemble Fusion",
        "SKNN + NN Fusion",
        "SASRec + Ensemble Fusion",
        "SASRec + NN Fusion",
        "SASRec (Unified Local-Only)",
    ] {
        assert!(table.contains(row), "missing {row} in\n{table}");
    }
    let stored: EvalOutput = serde_json::from_slice(&fs::read(a.join(METRICS_JSON)).unwrap()).unwrap();
    assert_eq!(stored.reports.len(), 6);
    assert!(stored.reports.iter().chain(&stored.baselines).all(|r| r.is_monotone()));

    let second = hybridrec(&["run", "--config", &cfg, "--out", b.to_str().unwrap(), "--quiet"]);
    assert!(second.status.success(), "{}", stderr(&second));
    assert_eq!(fs::read(a.join(METRICS_CSV)).unwrap(), fs::read(b.join(METRICS_CSV)).unwrap());
    assert_eq!(outputs(&a), outputs(&b));

    let report = hybridrec(&["report", "--config", &cfg]);
    assert!(report.status.success());
    assert_eq!(stdout(&report), table);
}

#[test]
fn resume_skips_finished_work_and_retrains_missing_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let mut text = tiny_synthetic_config(&out, 2, 3000);
    text = text.replace("out_dir", "bases = [\"sasrec\"]\nout_dir");
    let cfg = write_config(tmp.path(), &text);
    assert!(hybridrec(&["run", "--config", &cfg, "--quiet"]).status.success());
    let before = outputs(&out);

    let again = hybridrec(&["train", "--config", &cfg, "--resume"]);
    assert!(again.status.success());
    assert!(stderr(&again).contains("[train:sasrec] up to date"), "{}", stderr(&again));

    fs::remove_file(out.join("models/sasrec/registry/03.sasrec")).unwrap();
    let partial = hybridrec(&["train", "--config", &cfg, "--resume"]);
    assert!(partial.status.success(), "{}", stderr(&partial));
    let log = stderr(&partial);
    assert_eq!(log.matches("reusing checkpoint").count(), 3 + 10, "{log}");
    assert_eq!(outputs(&out), before);

    let eval = hybridrec(&["evaluate", "--config", &cfg, "--resume"]);
    assert!(stderr(&eval).contains("[evaluate] up to date"));
}

#[test]
fn generate_is_deterministic_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny_synthetic_config(&tmp.path().join("x"), 1, 2000));
    let hashes = |out: &str, seed: &str| {
        assert!(hybridrec(&["generate", "--config", &cfg, "--out", out, "--seed", seed, "-q"]).status.success());
        ["data/articles.csv", "data/interactions.csv"].map(|f| fs::read(Path::new(out).join(f)).unwrap())
    };
    let o1 = tmp.path().join("g1");
    let o2 = tmp.path().join("g2");
    let o3 = tmp.path().join("g3");
    let h1 = hashes(o1.to_str().unwrap(), "9");
    assert_eq!(h1, hashes(o2.to_str().unwrap(), "9"));
    assert_ne!(h1[1], hashes(o3.to_str().unwrap(), "10")[1]);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = hybridrec(&["generate", "--config", "/nonexistent/experiment.toml"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(stderr(&missing).contains("nonexistent"));

    let bad = write_config(tmp.path(), "[eval]\nks = [50, 10]\n");
    assert_eq!(hybridrec(&["generate", "--config", &bad]).status.code(), Some(1));
    assert_eq!(hybridrec(&["frobnicate"]).status.code(), Some(1));

    let out = tmp.path().join("empty");
    let cfg = write_config(tmp.path(), &tiny_synthetic_config(&out, 0, 2000));
    let eval = hybridrec(&["evaluate", "--config", &cfg]);
    assert_eq!(eval.status.code(), Some(2));
    assert!(stderr(&eval).contains("`generate`"), "{}", stderr(&eval));

    assert!(hybridrec(&["generate", "--config", &cfg, "-q"]).status.success());
    let fuse = hybridrec(&["fuse", "--config", &cfg, "-q"]);
    assert_eq!(fuse.status.code(), Some(2));
    assert!(stderr(&fuse).contains("`train`"), "{}", stderr(&fuse));
}

#[test]
fn sknn_only_run_writes_sknn_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let text = tiny_synthetic_config(&out, 3, 2500).replace("out_dir", "bases = [\"sknn\"]\nout_dir");
    let cfg = write_config(tmp.path(), &text);
    let o = hybridrec(&["run", "--config", &cfg, "-q"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("models/sknn/registry/00.sknn").is_dir());
    assert!(!out.join("models/sasrec").exists());
    assert!(stdout(&o).contains("SKNN + NN Fusion"));
}

#[test]
fn labeling_failures_are_partial_and_resumable() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = write_eb_fixture(&tmp.path().join("eb"), 4, 2000);
    let out = tmp.path().join("run");
    let cfg = write_config(tmp.path(), &eb_config(&out, &fx, 4));
    let word = |l: Locality| if l == Locality::Local { "local" } else { "nonlocal" };

    // Every fifth article gets no answer and fails.
    let mut partial = String::from("article_id,response\n");
    for (i, (id, loc)) in fx.truth.iter().enumerate() {
        if i % 5 != 0 {
            partial.push_str(&format!("{id},{}\n", word(*loc)));
        }
    }
    fs::write(&fx.mock, &partial).unwrap();
    assert!(hybridrec(&["generate", "--config", &cfg, "-q"]).status.success());
    let first = hybridrec(&["label", "--config", &cfg, "-q"]);
    assert_eq!(first.status.code(), Some(3), "{}", stderr(&first));
    let n_failed = fx.truth.len().div_ceil(5);
    let failures = fs::read_to_string(out.join("data/label_failures.csv")).unwrap();
    assert_eq!(failures.lines().count() - 1, n_failed);
    let cat = parse_articles(&out.join(LABELED_ARTICLES), ArticleFormat::EbnerdCsv).unwrap();
    let unknown = cat.articles().iter().filter(|a| a.locality == Locality::Unknown).count();
    assert_eq!(unknown, n_failed);
    let train = hybridrec(&["train", "--config", &cfg, "-q"]);
    assert_eq!(train.status.code(), Some(2));
    assert!(stderr(&train).contains("`label`"));

    // Answers for already-labeled articles become garbage; a resumed run
    // must not ask for them again.
    let mut fixed = String::from("article_id,response\n");
    for (i, (id, loc)) in fx.truth.iter().enumerate() {
        let reply = if i % 5 == 0 { word(*loc) } else { "maybe" };
        fixed.push_str(&format!("{id},{reply}\n"));
    }
    fs::write(&fx.mock, fixed).unwrap();
    let resumed = hybridrec(&["label", "--config", &cfg, "--resume"]);
    assert!(resumed.status.success(), "{}", stderr(&resumed));
    let cat = parse_articles(&out.join(LABELED_ARTICLES), ArticleFormat::EbnerdCsv).unwrap();
    for (id, loc) in &fx.truth {
        let item = cat.lookup(id).unwrap();
        assert_eq!(cat.article(item).locality, *loc, "{id}");
    }
}
