#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hybridrec_core::corpus::Locality;
use hybridrec_core::syngen::{generate, CellCounts, GeneratorConfig};

pub const EB_CATEGORIES: [&str; 10] = [
    "nyheder",
    "sport",
    "krimi",
    "underholdning",
    "nationen",
    "penge",
    "musik",
    "forbrug",
    "sex og samliv",
    "ferie",
];

pub fn hybridrec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hybridrec"))
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Small SASRec and fusion settings so a whole run takes seconds.
pub const FAST_MODELS: &str = r#"
[sasrec]
max_seq_len = 10
embed_dim = 16
n_epochs = 3
batch_size = 32
max_validation_events = 200

[sknn]
k = 50
sample_size = 200

[fusion]
hidden = 8
n_epochs = 3
n_neg = 10
"#;

/// Synthetic run over a ~150-item catalog and about `clicks` clicks.
pub fn tiny_synthetic_config(out: &Path, seed: u64, clicks: usize) -> String {
    format!(
        r#"seed = {seed}
out_dir = "{}"

[dataset]
kind = "synthetic"
target_clicks = {clicks}

[dataset.generator]
successors_per_item = 4
successor_window = 6

[dataset.generator.n_items_per_cell]
News = {{ local = 30, nonlocal = 20 }}
Sports = {{ local = 20, nonlocal = 20 }}
"Life and Culture" = {{ local = 25, nonlocal = 15 }}
{FAST_MODELS}"#,
        out.display()
    )
}

pub struct EbFixture {
    pub articles: PathBuf,
    pub interactions: PathBuf,
    pub texts: PathBuf,
    pub mock: PathBuf,
    /// Ground-truth localities, in catalog order.
    pub truth: Vec<(String, Locality)>,
}

/// Writes an EB-NeRD-shaped article file (publisher categories, no
/// locality column), an interaction log without session ids, article texts
/// and a mock labeler fixture answering with the true localities.
pub fn write_eb_fixture(dir: &Path, seed: u64, clicks: usize) -> EbFixture {
    std::fs::create_dir_all(dir).unwrap();
    let share = 1.0 / EB_CATEGORIES.len() as f64;
    let cfg = GeneratorConfig {
        n_items_per_cell: EB_CATEGORIES
            .iter()
            .map(|c| (c.to_string(), CellCounts { local: 12, nonlocal: 8 }))
            .collect(),
        category_proportions: EB_CATEGORIES.iter().map(|c| (c.to_string(), share)).collect(),
        local_fraction_per_category: EB_CATEGORIES.iter().map(|c| (c.to_string(), 0.6)).collect(),
        successors_per_item: 4,
        successor_window: 6,
        seed,
        ..GeneratorConfig::default()
    }
    .scaled_to_clicks(clicks);
    let ds = generate(&cfg).unwrap();

    let mut articles = String::from("article_id,title,subtitle,body,category_str,premium\n");
    let mut texts = String::from("article_id,title,subtitle,body\n");
    let mut mock = String::from("article_id,response\n");
    let mut truth = Vec::new();
    for (i, a) in ds.catalog.articles().iter().enumerate() {
        let place = if a.locality == Locality::Local { "København" } else { "Bruxelles" };
        let title = format!("Nyt fra {place} om {}", a.category);
        let body = format!("Artikel {} handler om {place}, {{og}} mere.", a.id);
        writeln!(articles, "{},{title},,\"{body}\",{},{}", a.id, a.category, i % 2 == 0).unwrap();
        writeln!(texts, "{},{title},,\"{body}\"", a.id).unwrap();
        let reply = match (a.locality, i % 3) {
            (Locality::Local, 0) => " Local\n",
            (Locality::Local, _) => "local",
            (_, 1) => "NONLOCAL",
            _ => "nonlocal",
        };
        writeln!(mock, "{},\"{reply}\"", a.id).unwrap();
        truth.push((a.id.clone(), a.locality));
    }
    let mut inter = String::from("user_id,article_id,timestamp,session_id\n");
    for r in ds.interactions() {
        writeln!(inter, "{},{},{},", r.user_id, r.article_id, r.timestamp).unwrap();
    }
    let f = EbFixture {
        articles: dir.join("articles.csv"),
        interactions: dir.join("behaviors.csv"),
        texts: dir.join("texts.csv"),
        mock: dir.join("mock_labels.csv"),
        truth,
    };
    std::fs::write(&f.articles, articles).unwrap();
    std::fs::write(&f.texts, texts).unwrap();
    std::fs::write(&f.mock, mock).unwrap();
    std::fs::write(&f.interactions, inter).unwrap();
    f
}

pub fn eb_config(out: &Path, f: &EbFixture, seed: u64) -> String {
    format!(
        r#"seed = {seed}
out_dir = "{}"
bases = ["sasrec"]

[dataset]
kind = "ingest"
articles = "{}"
interactions = "{}"
format = "ebnerd_csv"
article_texts = "{}"

[labeler]
mock_mode = true
mock_fixture = "{}"
max_retries = 0

[eval]
layout = "global_vs_fusion"
{FAST_MODELS}"#,
        out.display(),
        f.articles.display(),
        f.interactions.display(),
        f.texts.display(),
        f.mock.display()
    )
}
