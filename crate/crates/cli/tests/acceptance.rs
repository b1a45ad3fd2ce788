//! End-to-end acceptance checks. Prints one `CRITERION n: PASS|FAIL` line
//! per criterion and exits non-zero if any fails.

mod common;
#[path = "../../core/tests/common/mod.rs"]
mod oracles;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use hybridrec_cli::config::ReportLayout;
use hybridrec_cli::manifest::RunManifest;
use hybridrec_cli::pipeline::{EvalOutput, LABELED_ARTICLES, METRICS_CSV};
use hybridrec_cli::{ExperimentConfig, Run};
use hybridrec_core::corpus::{parse_articles, ArticleFormat};
use hybridrec_core::eval::{evaluate, MetricsReport, PredictionEvent, RandomRecommender};
use hybridrec_core::fusion::{train_fusion, FusionConfig};
use hybridrec_core::rng::rng_from;
use hybridrec_core::sasrec::{grad_check, SasrecConfig};
use hybridrec_core::sknn::{SknnConfig, SknnModel};
use hybridrec_core::syngen::{generate, validate_proportions, GeneratorConfig};
use hybridrec_core::{ItemId, ItemScore, Locality};
use hybridrec_labeler::{build_prompt, read_article_texts, LabelError, Labeler, LabelerConfig, MockTransport};
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

fn run_pipeline(cfg: ExperimentConfig) -> Result<(EvalOutput, RunManifest), String> {
    let mut run = Run::open(cfg, false).map_err(|e| e.to_string())?;
    run.quiet = true;
    let out = run.run_all().map_err(|e| e.to_string())?;
    Ok((out, run.manifest().clone()))
}

fn hr(out: &EvalOutput, model: &str, k: usize) -> f64 {
    out.report(model).and_then(|r| r.hr(k)).unwrap_or(f64::NAN)
}

const TOTAL_BUDGET: Duration = Duration::from_secs(30 * 60);

fn table_ordering(tmp: &Path, reports: &mut Vec<MetricsReport>) -> Outcome {
    let start = Instant::now();
    let mut held = 0;
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let cfg = ExperimentConfig {
            seed,
            out_dir: tmp.join(format!("ordering-{seed}")),
            locality_baselines: false,
            ..ExperimentConfig::default()
        };
        let out = match run_pipeline(cfg) {
            Ok((o, _)) => o,
            Err(e) => return Outcome::new(false, format!("seed {seed}: {e}")),
        };
        let sknn = hr(&out, "SKNN (Global)", 10);
        let sas = |k| hr(&out, "SASRec (Global)", k);
        let nn = |k| hr(&out, "SASRec + NN Fusion", k);
        let ens = hr(&out, "SASRec + Ensemble Fusion", 10);
        let ok = sas(10) > sknn && [10, 20, 50].iter().all(|&k| nn(k) > sas(k)) && nn(10) > ens;
        held += ok as usize;
        lines.push(format!(
            "seed {seed}: SKNN {sknn:.4} SASRec {:.4}/{:.4}/{:.4} Ens {ens:.4} NN {:.4}/{:.4}/{:.4} -> {}",
            sas(10),
            sas(20),
            sas(50),
            nn(10),
            nn(20),
            nn(50),
            if ok { "holds" } else { "violated" }
        ));
        reports.extend(out.reports.into_iter().chain(out.baselines));
    }
    let elapsed = start.elapsed();
    let pass = held >= 2 && elapsed <= TOTAL_BUDGET;
    Outcome::new(
        pass,
        format!("{held}/3 seeds hold, {:.0}s total; {}", elapsed.as_secs_f64(), lines.join("; ")),
    )
}

fn gradients() -> Outcome {
    let cfg = SasrecConfig {
        max_seq_len: 4,
        embed_dim: 8,
        n_blocks: 2,
        n_heads: 2,
        seed: 5,
        ..SasrecConfig::default()
    };
    let start = Instant::now();
    match grad_check(&cfg) {
        Ok(r) => {
            let t = start.elapsed();
            Outcome::new(
                r.max_relative_error < 1e-4 && t < Duration::from_secs(60),
                format!("max relative error {:.2e} in {:.2}s", r.max_relative_error, t.as_secs_f64()),
            )
        }
        Err(e) => Outcome::new(false, e.to_string()),
    }
}

fn sknn_oracle_agreement() -> Outcome {
    let cands: Vec<ItemId> = (0..20).map(ItemId).collect();
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let (sessions, k, prefix) = oracles::random_sknn_fixture(seed);
        let model = SknnModel::fit(&sessions, SknnConfig { k, sample_size: sessions.len().max(1000) }).unwrap();
        let got = model.score(&prefix, &cands);
        let want = oracles::sknn_oracle(&sessions, k, &prefix, &cands);
        for (g, w) in got.iter().zip(&want) {
            worst = worst.max((g - w).abs());
        }
    }
    Outcome::new(worst <= 1e-12, format!("100 fixtures, max |diff| {worst:.1e}"))
}

fn mean_rank_oracle_agreement() -> Outcome {
    let mut checked = 0usize;
    let mut mismatches = 0usize;
    let mut check = |p: &[Vec<ItemScore>], ids: &[ItemId]| {
        checked += 1;
        mismatches += !oracles::mean_rank_agrees(p, ids) as usize;
    };
    let four = [None, Some(0.0), Some(1.0), Some(2.0)];
    for n_items in 1..=3 {
        let ids = oracles::candidate_ids(n_items);
        let columns = oracles::all_score_tables(n_items, &four);
        for n_experts in 1..=3 {
            oracles::for_each_panel(&columns, n_experts, |p| check(p, &ids));
        }
    }
    let three = [None, Some(0.0), Some(1.0)];
    for n_items in 4..=6 {
        let ids = oracles::candidate_ids(n_items);
        let columns = oracles::all_score_tables(n_items, &three);
        for n_experts in 1..=2 {
            oracles::for_each_panel(&columns, n_experts, |p| check(p, &ids));
        }
    }
    let ids = oracles::candidate_ids(6);
    for seed in 0..200 {
        let mut rng = rng_from(seed);
        let table: Vec<Vec<ItemScore>> = (0..3)
            .map(|_| {
                (0..6)
                    .map(|_| match rng.random_range(0..6) {
                        0 => None,
                        1..=3 => Some(rng.random_range(0..4) as f64),
                        _ => Some(rng.random_range(-5.0..5.0)),
                    })
                    .collect()
            })
            .collect();
        for items in 1u32..64 {
            let pick: Vec<usize> = (0..6).filter(|b| items >> b & 1 == 1).collect();
            let cands: Vec<ItemId> = pick.iter().map(|&i| ids[i]).collect();
            for experts in 1u32..8 {
                let panel: Vec<Vec<ItemScore>> = (0..3)
                    .filter(|e| experts >> e & 1 == 1)
                    .map(|e| pick.iter().map(|&i| table[e][i]).collect())
                    .collect();
                check(&panel, &cands);
            }
        }
    }
    Outcome::new(mismatches == 0, format!("{checked} panels, {mismatches} mismatches"))
}

fn fusion_learnability() -> Outcome {
    let (catalog, sessions, panel) = oracles::separable_fixture(3);
    let cfg = FusionConfig {
        n_epochs: 20,
        seed: 3,
        ..FusionConfig::default()
    };
    match train_fusion(&panel, &sessions, &[], &catalog, &cfg) {
        Ok((_, r)) => {
            let (first, last) = (r.epoch_losses[0], *r.epoch_losses.last().unwrap());
            Outcome::new(
                r.train_accuracy >= 0.99 && last < first,
                format!(
                    "accuracy {:.4} on {} examples, loss {first:.4} -> {last:.4}",
                    r.train_accuracy, r.n_examples
                ),
            )
        }
        Err(e) => Outcome::new(false, e.to_string()),
    }
}

fn metric_sanity(emitted: &[MetricsReport]) -> Outcome {
    const V: u32 = 500;
    const N: usize = 12_000;
    let vocab: BTreeSet<ItemId> = (0..V).map(ItemId).collect();
    let mut rng = rng_from(61);
    // The prefix item lies outside the vocabulary, so every pool has V items.
    let events: Vec<PredictionEvent> = (0..N)
        .map(|i| PredictionEvent {
            session_id: format!("e{i}"),
            prefix: vec![ItemId(V + 1)],
            truth: ItemId(rng.random_range(0..V)),
        })
        .collect();
    let report = evaluate("random", &RandomRecommender::new(8), &events, &vocab, V as usize, &[10, 20, 50]).unwrap();
    let mut pass = true;
    let mut detail = String::new();
    for (&k, &h) in report.ks.iter().zip(&report.hit_rates) {
        let p = k as f64 / V as f64;
        let sigma = (p * (1.0 - p) / N as f64).sqrt();
        let z = (h - p) / sigma;
        pass &= z.abs() <= 3.0;
        write!(detail, "HR@{k} {h:.4} vs {p:.4} ({z:+.2}σ); ").unwrap();
    }
    let non_monotone: Vec<&str> = emitted
        .iter()
        .chain([&report])
        .filter(|r| !r.is_monotone())
        .map(|r| r.model.as_str())
        .collect();
    pass &= non_monotone.is_empty();
    write!(detail, "{} reports, non-monotone: {non_monotone:?}", emitted.len() + 1).unwrap();
    Outcome::new(pass, detail)
}

fn generator_fidelity() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (clicks, tolerance) in [(1_000_000, 0.01), (100_000, 0.02)] {
        let cfg = GeneratorConfig {
            seed: 7,
            ..GeneratorConfig::default()
        }
        .scaled_to_clicks(clicks);
        let ds = generate(&cfg).unwrap();
        let r = validate_proportions(&ds, &cfg, tolerance);
        let worst = r.cells.iter().map(|c| c.abs_error).fold(0.0, f64::max);
        pass &= r.pass;
        parts.push(format!("{} clicks: worst cell error {worst:.4} (tol {tolerance})", r.n_clicks));
    }
    Outcome::new(pass, parts.join("; "))
}

fn prompt_fidelity() -> Outcome {
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("../labeler/tests/golden");
    let article = read_article_texts(std::fs::File::open(golden.join("article.csv")).unwrap()).unwrap();
    let expected = std::fs::read_to_string(golden.join("prompt_9001.txt")).unwrap();
    let prompt_ok = build_prompt(&article[0]) == expected;

    let accepted = [
        ("local", Locality::Local),
        (" Local\n", Locality::Local),
        ("LOCAL", Locality::Local),
        ("nonlocal", Locality::NonLocal),
        ("\tNonLocal ", Locality::NonLocal),
        ("NONLOCAL", Locality::NonLocal),
    ];
    let rejected = [
        "", "locals", "non-local", "non local", "Local.", "\"local\"", "local nonlocal", "I think local", "yes", "global",
    ];
    let classify = |reply: &str| {
        let mut a = article[0].clone();
        a.article_id = "probe".into();
        let transport = MockTransport::new([("probe".to_string(), reply.to_string())].into());
        let cfg = LabelerConfig {
            max_retries: 0,
            ..LabelerConfig::default()
        };
        Labeler::new(cfg, Box::new(transport)).classify(&a)
    };
    let accepts = accepted.iter().all(|(r, want)| classify(r).ok() == Some(*want));
    let rejects = rejected
        .iter()
        .all(|r| matches!(classify(r), Err(LabelError::UnparseableResponse { .. })));
    Outcome::new(
        prompt_ok && accepts && rejects,
        format!(
            "golden prompt {}, {} accepted replies {}, {} rejected replies {}",
            if prompt_ok { "matches" } else { "differs" },
            accepted.len(),
            if accepts { "ok" } else { "WRONG" },
            rejected.len(),
            if rejects { "ok" } else { "WRONG" }
        ),
    )
}

fn determinism(tmp: &Path, reports: &mut Vec<MetricsReport>) -> Outcome {
    let mut runs = Vec::new();
    for name in ["det-a", "det-b"] {
        let out = tmp.join(name);
        let cfg = ExperimentConfig::from_toml(&common::tiny_synthetic_config(&out, 11, 4000)).unwrap();
        match run_pipeline(cfg) {
            Ok((o, m)) => {
                reports.extend(o.reports.into_iter().chain(o.baselines));
                let hashes: Vec<(String, String)> = m
                    .stages
                    .values()
                    .flat_map(|s| s.outputs.iter().map(|(a, b)| (a.clone(), b.clone())))
                    .collect();
                runs.push((std::fs::read(out.join(METRICS_CSV)).unwrap(), hashes));
            }
            Err(e) => return Outcome::new(false, e),
        }
    }
    let same_metrics = runs[0].0 == runs[1].0;
    let same_hashes = runs[0].1 == runs[1].1;
    Outcome::new(
        same_metrics && same_hashes,
        format!(
            "metrics {}, {} hashed outputs {}",
            if same_metrics { "identical" } else { "differ" },
            runs[0].1.len(),
            if same_hashes { "identical" } else { "differ" }
        ),
    )
}

fn eb_smoke(tmp: &Path, reports: &mut Vec<MetricsReport>) -> Outcome {
    let fx = common::write_eb_fixture(&tmp.join("eb-data"), 21, 6000);
    let out = tmp.join("eb-run");
    let cfg = ExperimentConfig::from_toml(&common::eb_config(&out, &fx, 21)).unwrap();
    let (eval, _) = match run_pipeline(cfg) {
        Ok(r) => r,
        Err(e) => return Outcome::new(false, e),
    };
    let cat = parse_articles(&out.join(LABELED_ARTICLES), ArticleFormat::EbnerdCsv).unwrap();
    let labeled_ok = fx
        .truth
        .iter()
        .all(|(id, loc)| cat.lookup(id).is_some_and(|i| cat.article(i).locality == *loc));
    let rows: Vec<String> = eval.reports.iter().map(|r| r.model.clone()).collect();
    let shaped = eval.layout == ReportLayout::GlobalVsFusion
        && rows == ["SASRec (Global)", "SASRec + NN Fusion"]
        && cat.taxonomy().len() == 10;
    let table = eval.main_table().unwrap_or_default();
    reports.extend(eval.reports.into_iter().chain(eval.baselines));
    Outcome::new(
        labeled_ok && shaped,
        format!(
            "{} articles mock-labeled {}, rows {rows:?}\n{table}",
            fx.truth.len(),
            if labeled_ok { "correctly" } else { "WRONGLY" }
        ),
    )
}

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let mut reports = Vec::new();
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut record = |n: usize, o: Outcome| {
        eprintln!("[acceptance] criterion {n} done: {}", if o.pass { "PASS" } else { "FAIL" });
        results.push((n, o));
    };
    record(2, gradients());
    record(3, sknn_oracle_agreement());
    record(4, mean_rank_oracle_agreement());
    record(5, fusion_learnability());
    record(7, generator_fidelity());
    record(8, prompt_fidelity());
    record(9, determinism(tmp.path(), &mut reports));
    record(10, eb_smoke(tmp.path(), &mut reports));
    record(1, table_ordering(tmp.path(), &mut reports));
    record(6, metric_sanity(&reports));

    results.sort_by_key(|(n, _)| *n);
    for (n, o) in &results {
        println!("CRITERION {n}: {} {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    if results.iter().any(|(_, o)| !o.pass) {
        std::process::exit(1);
    }
}
