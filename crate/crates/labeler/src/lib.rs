//! Local / non-local article labeling with a chat-completion model.
//!
//! Each article is rendered into a fixed prompt, sent to an
//! OpenAI-compatible `/chat/completions` endpoint (or answered from a
//! fixture in mock mode), and the reply must be exactly `local` or
//! `nonlocal` after trimming and lowercasing.

mod transport;

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Duration;

use hybridrec_core::corpus::Locality;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use transport::{ChatTransport, HttpTransport, MockTransport, TransportError};

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("article `{article_id}`: unparseable response {response:?}")]
    UnparseableResponse { article_id: String, response: String },
    #[error("article `{article_id}`: {source}")]
    Transport {
        article_id: String,
        #[source]
        source: TransportError,
    },
    #[error("invalid labeler config: {0}")]
    Config(String),
    #[error("progress file: {0}")]
    Progress(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArticleText {
    pub article_id: String,
    pub title: String,
    pub subtitle: String,
    pub body: String,
}

pub const PROMPT_TEMPLATE: &str = "You are given a news article from Ekstra Bladet (in Danish) with the following details:
Title: {title}
Subtitle: {subtitle}
Body: {body}

Task:
1. Read the title, subtitle, and body of the article carefully.
2. Determine whether the article is about Denmark (local) or about other countries / global topics (non-local).
3. Provide your classification as either 'local' or 'nonlocal'.

Important: Output only the single word 'local' or 'nonlocal' with no additional text or explanation.

Now, please provide the answer.";

/// Fills the template in one pass, so braces inside article text are never
/// re-expanded.
pub fn build_prompt(article: &ArticleText) -> String {
    let mut out = String::with_capacity(PROMPT_TEMPLATE.len() + article.title.len() + article.subtitle.len() + article.body.len());
    let mut rest = PROMPT_TEMPLATE;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open..];
        let close = tail.find('}').expect("template placeholders are closed");
        match &tail[1..close] {
            "title" => out.push_str(&article.title),
            "subtitle" => out.push_str(&article.subtitle),
            "body" => out.push_str(&article.body),
            other => unreachable!("unknown placeholder {other}"),
        }
        rest = &tail[close + 1..];
    }
    out.push_str(rest);
    out
}

/// `local` or `nonlocal` after trim + lowercase; anything else is `None`.
pub fn parse_label(reply: &str) -> Option<Locality> {
    match reply.trim().to_lowercase().as_str() {
        "local" => Some(Locality::Local),
        "nonlocal" => Some(Locality::NonLocal),
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelerConfig {
    pub endpoint_url: String,
    pub model_name: String,
    /// Extra attempts after the first one.
    pub max_retries: u32,
    pub timeout_secs: u64,
    pub mock_mode: bool,
    /// CSV `article_id,response` answering requests in mock mode.
    pub mock_fixture: Option<PathBuf>,
    /// Environment variable holding the bearer token, if any.
    pub api_key_env: String,
    pub concurrency: usize,
    pub temperature: f64,
}

impl Default for LabelerConfig {
    fn default() -> Self {
        LabelerConfig {
            endpoint_url: "http://localhost:11434/v1/chat/completions".into(),
            model_name: "llama3".into(),
            max_retries: 2,
            timeout_secs: 60,
            mock_mode: false,
            mock_fixture: None,
            api_key_env: "LABELER_API_KEY".into(),
            concurrency: 4,
            temperature: 0.0,
        }
    }
}

pub struct Labeler {
    config: LabelerConfig,
    transport: Box<dyn ChatTransport>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelFailure {
    pub article_id: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabelOutcome {
    pub labels: BTreeMap<String, Locality>,
    /// In input order.
    pub failures: Vec<LabelFailure>,
    /// Articles answered from the progress file without a request.
    pub resumed: usize,
}

impl Labeler {
    pub fn new(config: LabelerConfig, transport: Box<dyn ChatTransport>) -> Self {
        Labeler { config, transport }
    }

    /// Mock transport from the fixture in mock mode, HTTP otherwise.
    pub fn from_config(config: LabelerConfig) -> Result<Self, LabelError> {
        if config.concurrency == 0 {
            return Err(LabelError::Config("concurrency must be at least 1".into()));
        }
        let transport: Box<dyn ChatTransport> = if config.mock_mode {
            let path = config
                .mock_fixture
                .as_ref()
                .ok_or_else(|| LabelError::Config("mock mode needs mock_fixture".into()))?;
            Box::new(MockTransport::from_csv(File::open(path)?)?)
        } else {
            let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
            Box::new(
                HttpTransport::new(
                    &config.endpoint_url,
                    &config.model_name,
                    config.temperature,
                    api_key,
                    Duration::from_secs(config.timeout_secs),
                )
                .map_err(|e| LabelError::Config(e.to_string()))?,
            )
        };
        Ok(Labeler { config, transport })
    }

    pub fn config(&self) -> &LabelerConfig {
        &self.config
    }

    /// Up to `1 + max_retries` attempts; the last error is returned.
    pub fn classify(&self, article: &ArticleText) -> Result<Locality, LabelError> {
        let prompt = build_prompt(article);
        let mut last = None;
        for _ in 0..=self.config.max_retries {
            match self.transport.complete(&article.article_id, &prompt) {
                Ok(reply) => match parse_label(&reply) {
                    Some(label) => return Ok(label),
                    None => {
                        last = Some(LabelError::UnparseableResponse {
                            article_id: article.article_id.clone(),
                            response: reply,
                        })
                    }
                },
                Err(source) => {
                    last = Some(LabelError::Transport {
                        article_id: article.article_id.clone(),
                        source,
                    })
                }
            }
        }
        Err(last.expect("at least one attempt"))
    }

    /// Labels every article not already recorded in `progress`, with at most
    /// `concurrency` requests in flight. Each success is appended to the
    /// progress file as soon as it arrives.
    pub fn label_corpus(&self, articles: &[ArticleText], progress: Option<&Path>) -> Result<LabelOutcome, LabelError> {
        let mut outcome = LabelOutcome::default();
        if let Some(p) = progress.filter(|p| p.exists()) {
            for (id, label) in read_progress(File::open(p)?)? {
                outcome.labels.insert(id, label);
            }
        }
        let pending: Vec<&ArticleText> = articles
            .iter()
            .filter(|a| !outcome.labels.contains_key(&a.article_id))
            .collect();
        outcome.resumed = articles.len() - pending.len();

        let mut writer = match progress {
            Some(p) => {
                let fresh = !p.exists() || std::fs::metadata(p)?.len() == 0;
                let mut w = BufWriter::new(OpenOptions::new().create(true).append(true).open(p)?);
                if fresh {
                    writeln!(w, "article_id,label")?;
                    w.flush()?;
                }
                Some(w)
            }
            None => None,
        };

        let next = AtomicUsize::new(0);
        let (tx, rx) = mpsc::channel::<(usize, Result<Locality, LabelError>)>();
        let mut results: Vec<Option<Result<Locality, LabelError>>> = (0..pending.len()).map(|_| None).collect();
        let mut write_err = None;
        std::thread::scope(|scope| {
            for _ in 0..self.config.concurrency.min(pending.len()) {
                let tx = tx.clone();
                let next = &next;
                let pending = &pending;
                scope.spawn(move || loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= pending.len() {
                        break;
                    }
                    if tx.send((i, self.classify(pending[i]))).is_err() {
                        break;
                    }
                });
            }
            drop(tx);
            for (i, res) in rx {
                if let (Some(w), Ok(label)) = (writer.as_mut(), &res) {
                    let line = format!("{},{}\n", csv_field(&pending[i].article_id), label_word(*label));
                    if let Err(e) = w.write_all(line.as_bytes()).and_then(|_| w.flush()) {
                        write_err.get_or_insert(e);
                    }
                }
                results[i] = Some(res);
            }
        });
        if let Some(e) = write_err {
            return Err(e.into());
        }
        for (a, res) in pending.iter().zip(results) {
            match res.expect("every pending article reports") {
                Ok(label) => {
                    outcome.labels.insert(a.article_id.clone(), label);
                }
                Err(e) => outcome.failures.push(LabelFailure {
                    article_id: a.article_id.clone(),
                    reason: e.to_string(),
                }),
            }
        }
        Ok(outcome)
    }
}

/// The word stored in progress files and sent back by the model.
pub fn label_word(l: Locality) -> &'static str {
    match l {
        Locality::Local => "local",
        _ => "nonlocal",
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Reads a progress file (`article_id,label`). Later rows win.
pub fn read_progress<R: Read>(reader: R) -> Result<Vec<(String, Locality)>, LabelError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let (id, raw) = (rec.get(0).unwrap_or(""), rec.get(1).unwrap_or(""));
        let label = parse_label(raw).ok_or_else(|| LabelError::Progress(format!("bad label `{raw}` for `{id}`")))?;
        out.push((id.to_string(), label));
    }
    Ok(out)
}

/// Reads article texts from a CSV with `article_id`, `title`, `subtitle`
/// and `body` columns; other columns are ignored and `subtitle`/`body` may
/// be absent.
pub fn read_article_texts<R: Read>(reader: R) -> Result<Vec<ArticleText>, LabelError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let id = col("article_id").ok_or_else(|| LabelError::Config("missing column article_id".into()))?;
    let title = col("title").ok_or_else(|| LabelError::Config("missing column title".into()))?;
    let (subtitle, body) = (col("subtitle"), col("body"));
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let get = |c: Option<usize>| c.and_then(|c| rec.get(c)).unwrap_or("").to_string();
        let a = ArticleText {
            article_id: get(Some(id)).trim().to_string(),
            title: get(Some(title)),
            subtitle: get(subtitle),
            body: get(body),
        };
        if a.title.trim().is_empty() {
            return Err(LabelError::Config(format!("article `{}` has an empty title", a.article_id)));
        }
        out.push(a);
    }
    Ok(out)
}
