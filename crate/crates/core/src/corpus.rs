//! Data model, CSV ingestion, sessionization and chronological splitting.
//!
//! Articles are interned into a [`Catalog`] sorted by article id, so the
//! numeric [`ItemId`] order coincides with lexicographic id order. Every
//! ranking tie-break in the crate relies on this.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Categories of the Syracuse-shaped taxonomy.
pub const SYRACUSE_CATEGORIES: [&str; 3] = ["News", "Sports", "Life and Culture"];

/// Default session inactivity gap, in seconds.
pub const DEFAULT_SESSION_GAP_SECS: u64 = 30 * 60;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing required column `{0}`")]
    MissingColumn(&'static str),
    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: u64, reason: String },
    #[error("duplicate article id `{0}`")]
    DuplicateArticleId(String),
    #[error("interaction references unknown article `{0}`")]
    UnresolvableArticle(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("need at least 3 sessions to split, got {0}")]
    InsufficientSessions(usize),
}

impl CorpusError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Dense index of an article inside a [`Catalog`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ItemId(pub u32);

impl ItemId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Locality {
    Local,
    NonLocal,
    Unknown,
}

impl Locality {
    /// File representation: `local`, `nonlocal`, or empty.
    pub fn as_str(self) -> &'static str {
        match self {
            Locality::Local => "local",
            Locality::NonLocal => "nonlocal",
            Locality::Unknown => "",
        }
    }

    pub fn parse(raw: &str) -> Option<Locality> {
        match raw.trim().to_ascii_lowercase().as_str() {
            "local" => Some(Locality::Local),
            "nonlocal" | "non-local" => Some(Locality::NonLocal),
            "" | "unknown" => Some(Locality::Unknown),
            _ => None,
        }
    }
}

impl fmt::Display for Locality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Locality::Unknown => f.write_str("unknown"),
            other => f.write_str(other.as_str()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Article {
    pub id: String,
    pub category: String,
    pub locality: Locality,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Catalog {
    articles: Vec<Article>,
    index: HashMap<String, ItemId>,
    taxonomy: BTreeSet<String>,
}

impl Catalog {
    /// Builds a catalog over a declared taxonomy. Articles are re-ordered by id.
    pub fn new<I, S>(taxonomy: I, mut articles: Vec<Article>) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let taxonomy: BTreeSet<String> = taxonomy.into_iter().map(Into::into).collect();
        if let Some(a) = articles.iter().find(|a| !taxonomy.contains(&a.category)) {
            return Err(CorpusError::InvalidArgument(format!(
                "article `{}` has category `{}` outside the taxonomy",
                a.id, a.category
            )));
        }
        articles.sort_by(|a, b| a.id.cmp(&b.id));
        if let Some(w) = articles.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(CorpusError::DuplicateArticleId(w[0].id.clone()));
        }
        let index = articles
            .iter()
            .enumerate()
            .map(|(i, a)| (a.id.clone(), ItemId(i as u32)))
            .collect();
        Ok(Catalog {
            articles,
            index,
            taxonomy,
        })
    }

    /// Builds a catalog whose taxonomy is the set of observed categories.
    pub fn from_articles(articles: Vec<Article>) -> Result<Self, CorpusError> {
        let taxonomy: BTreeSet<String> = articles.iter().map(|a| a.category.clone()).collect();
        Catalog::new(taxonomy, articles)
    }

    pub fn len(&self) -> usize {
        self.articles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.articles.is_empty()
    }

    pub fn article(&self, id: ItemId) -> &Article {
        &self.articles[id.index()]
    }

    pub fn lookup(&self, article_id: &str) -> Option<ItemId> {
        self.index.get(article_id).copied()
    }

    pub fn articles(&self) -> &[Article] {
        &self.articles
    }

    pub fn item_ids(&self) -> impl Iterator<Item = ItemId> + '_ {
        (0..self.articles.len() as u32).map(ItemId)
    }

    pub fn taxonomy(&self) -> &BTreeSet<String> {
        &self.taxonomy
    }

    pub fn set_locality(&mut self, id: ItemId, locality: Locality) {
        self.articles[id.index()].locality = locality;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArticleFormat {
    /// Fixed three-category taxonomy, locality column expected.
    SyracuseCsv,
    /// Open taxonomy (publisher categories), locality column optional.
    EbnerdCsv,
}

pub fn parse_articles(path: &Path, format: ArticleFormat) -> Result<Catalog, CorpusError> {
    let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    read_articles(file, format)
}

pub fn read_articles<R: Read>(reader: R, format: ArticleFormat) -> Result<Catalog, CorpusError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(false).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let id_col = col("article_id").ok_or(CorpusError::MissingColumn("article_id"))?;
    let cat_col = col("category")
        .or_else(|| col("category_str"))
        .ok_or(CorpusError::MissingColumn("category"))?;
    let loc_col = col("locality");

    let declared: Option<BTreeSet<String>> = match format {
        ArticleFormat::SyracuseCsv => Some(SYRACUSE_CATEGORIES.iter().map(|s| s.to_string()).collect()),
        ArticleFormat::EbnerdCsv => None,
    };

    let mut articles = Vec::new();
    let mut seen = BTreeSet::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let malformed = |reason: String| CorpusError::MalformedRow { line, reason };
        let id = record.get(id_col).unwrap_or("").trim().to_string();
        if id.is_empty() {
            return Err(malformed("empty article_id".into()));
        }
        let category = record.get(cat_col).unwrap_or("").trim().to_string();
        if category.is_empty() {
            return Err(malformed("empty category".into()));
        }
        if let Some(tax) = &declared {
            if !tax.contains(&category) {
                return Err(malformed(format!("category `{category}` not in taxonomy")));
            }
        }
        let locality = match loc_col {
            Some(c) => {
                let raw = record.get(c).unwrap_or("");
                Locality::parse(raw).ok_or_else(|| malformed(format!("bad locality `{raw}`")))?
            }
            None => Locality::Unknown,
        };
        if !seen.insert(id.clone()) {
            return Err(CorpusError::DuplicateArticleId(id));
        }
        articles.push(Article {
            id,
            category,
            locality,
        });
    }
    match declared {
        Some(tax) => Catalog::new(tax, articles),
        None => Catalog::from_articles(articles),
    }
}

pub fn write_articles<W: Write>(writer: W, catalog: &Catalog) -> Result<(), CorpusError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["article_id", "category", "locality"])?;
    for a in catalog.articles() {
        w.write_record([a.id.as_str(), a.category.as_str(), a.locality.as_str()])?;
    }
    w.flush().map_err(|e| CorpusError::Io {
        path: "<articles>".into(),
        source: e,
    })?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Interaction {
    pub user_id: String,
    pub article_id: String,
    pub timestamp: i64,
    pub session_id: Option<String>,
}

pub fn parse_interactions(path: &Path) -> Result<Vec<Interaction>, CorpusError> {
    let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    read_interactions(file)
}

pub fn read_interactions<R: Read>(reader: R) -> Result<Vec<Interaction>, CorpusError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Ok(Vec::new());
    }
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let user_col = col("user_id").ok_or(CorpusError::MissingColumn("user_id"))?;
    let art_col = col("article_id").ok_or(CorpusError::MissingColumn("article_id"))?;
    let ts_col = col("timestamp").ok_or(CorpusError::MissingColumn("timestamp"))?;
    let sess_col = col("session_id");

    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |c: usize| {
            record.get(c).map(str::trim).ok_or_else(|| CorpusError::MalformedRow {
                line,
                reason: format!("expected at least {} fields", c + 1),
            })
        };
        let user_id = field(user_col)?.to_string();
        let article_id = field(art_col)?.to_string();
        let raw_ts = field(ts_col)?;
        let timestamp = raw_ts.parse::<i64>().map_err(|_| CorpusError::MalformedRow {
            line,
            reason: format!("timestamp `{raw_ts}` is not an integer"),
        })?;
        if user_id.is_empty() || article_id.is_empty() {
            return Err(CorpusError::MalformedRow {
                line,
                reason: "empty user_id or article_id".into(),
            });
        }
        let session_id = sess_col
            .and_then(|c| record.get(c))
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string);
        out.push(Interaction {
            user_id,
            article_id,
            timestamp,
            session_id,
        });
    }
    Ok(out)
}

pub fn write_interactions<W: Write>(writer: W, interactions: &[Interaction]) -> Result<(), CorpusError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["user_id", "article_id", "timestamp", "session_id"])?;
    for i in interactions {
        w.write_record([
            i.user_id.as_str(),
            i.article_id.as_str(),
            &i.timestamp.to_string(),
            i.session_id.as_deref().unwrap_or(""),
        ])?;
    }
    w.flush().map_err(|e| CorpusError::Io {
        path: "<interactions>".into(),
        source: e,
    })?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Click {
    pub item: ItemId,
    pub timestamp: i64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Session {
    pub id: String,
    pub user_id: String,
    pub clicks: Vec<Click>,
}

impl Session {
    pub fn len(&self) -> usize {
        self.clicks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clicks.is_empty()
    }

    /// Length-1 sessions yield no prediction events.
    pub fn too_short(&self) -> bool {
        self.clicks.len() < 2
    }

    pub fn items(&self) -> Vec<ItemId> {
        self.clicks.iter().map(|c| c.item).collect()
    }

    pub fn first_timestamp(&self) -> i64 {
        self.clicks.first().map_or(i64::MIN, |c| c.timestamp)
    }

    pub fn last_timestamp(&self) -> i64 {
        self.clicks.last().map_or(i64::MIN, |c| c.timestamp)
    }
}

/// Groups interactions into sessions.
///
/// Interactions carrying a `session_id` are grouped by it. The rest are split
/// per user whenever two consecutive clicks are more than `gap_secs` apart
/// (`u64::MAX` disables splitting). Clicks are stably sorted by timestamp and
/// sessions are returned ordered by first click, ties by input order.
pub fn sessionize(
    interactions: &[Interaction],
    gap_secs: u64,
    catalog: &Catalog,
) -> Result<Vec<Session>, CorpusError> {
    if gap_secs == 0 {
        return Err(CorpusError::InvalidArgument("session gap must be positive".into()));
    }

    // (first input index, session) pairs; ordered maps keep output deterministic.
    let mut keyed: BTreeMap<&str, (usize, String, Vec<(usize, Click)>)> = BTreeMap::new();
    let mut per_user: BTreeMap<&str, Vec<(usize, Click)>> = BTreeMap::new();
    for (pos, it) in interactions.iter().enumerate() {
        let item = catalog
            .lookup(&it.article_id)
            .ok_or_else(|| CorpusError::UnresolvableArticle(it.article_id.clone()))?;
        let click = Click {
            item,
            timestamp: it.timestamp,
        };
        match &it.session_id {
            Some(sid) => {
                keyed
                    .entry(sid.as_str())
                    .or_insert_with(|| (pos, it.user_id.clone(), Vec::new()))
                    .2
                    .push((pos, click));
            }
            None => per_user.entry(it.user_id.as_str()).or_default().push((pos, click)),
        }
    }

    let mut sessions: Vec<(usize, Session)> = Vec::new();
    for (sid, (first, user, mut clicks)) in keyed {
        clicks.sort_by_key(|(pos, c)| (c.timestamp, *pos));
        sessions.push((
            first,
            Session {
                id: sid.to_string(),
                user_id: user,
                clicks: clicks.into_iter().map(|(_, c)| c).collect(),
            },
        ));
    }
    for (user, mut clicks) in per_user {
        clicks.sort_by_key(|(pos, c)| (c.timestamp, *pos));
        let mut current: Vec<(usize, Click)> = Vec::new();
        let mut n = 0usize;
        let mut flush = |current: &mut Vec<(usize, Click)>, sessions: &mut Vec<(usize, Session)>| {
            if current.is_empty() {
                return;
            }
            let first = current.iter().map(|(p, _)| *p).min().unwrap_or(0);
            sessions.push((
                first,
                Session {
                    id: format!("{user}#{n}"),
                    user_id: user.to_string(),
                    clicks: current.drain(..).map(|(_, c)| c).collect(),
                },
            ));
            n += 1;
        };
        for (pos, click) in clicks {
            if let Some((_, prev)) = current.last() {
                let delta = click.timestamp.saturating_sub(prev.timestamp);
                if delta > 0 && delta as u64 > gap_secs {
                    flush(&mut current, &mut sessions);
                }
            }
            current.push((pos, click));
        }
        flush(&mut current, &mut sessions);
    }

    sessions.sort_by_key(|(first, s)| (s.first_timestamp(), *first));
    Ok(sessions.into_iter().map(|(_, s)| s).collect())
}

/// Flattens sessions back into interaction rows, in session order.
pub fn sessions_to_interactions(sessions: &[Session], catalog: &Catalog) -> Vec<Interaction> {
    sessions
        .iter()
        .flat_map(|s| {
            s.clicks.iter().map(move |c| Interaction {
                user_id: s.user_id.clone(),
                article_id: catalog.article(c.item).id.clone(),
                timestamp: c.timestamp,
                session_id: Some(s.id.clone()),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.8,
            validation: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let parts = [self.train, self.validation, self.test];
        if parts.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(CorpusError::InvalidArgument(format!(
                "split ratios must be positive, got {parts:?}"
            )));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(CorpusError::InvalidArgument(format!(
                "split ratios must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitBundle {
    pub train: Vec<Session>,
    pub validation: Vec<Session>,
    pub test: Vec<Session>,
    /// `(t_train_end, t_val_end)`: the last click timestamp in train, and in
    /// train plus validation.
    pub boundaries: (i64, i64),
    /// Items clicked in validation or test but never in train.
    pub unseen_items: BTreeSet<ItemId>,
}

/// Per-split share of clicks in each (category, locality) cell.
pub type CellShares = BTreeMap<(String, Locality), f64>;

impl SplitBundle {
    pub fn train_vocabulary(&self) -> BTreeSet<ItemId> {
        self.train.iter().flat_map(|s| s.clicks.iter().map(|c| c.item)).collect()
    }

    /// Click shares per (category, locality) for train, validation and test.
    pub fn cell_distributions(&self, catalog: &Catalog) -> [CellShares; 3] {
        let shares = |sessions: &[Session]| {
            let mut counts: BTreeMap<(String, Locality), usize> = BTreeMap::new();
            let mut total = 0usize;
            for c in sessions.iter().flat_map(|s| &s.clicks) {
                let a = catalog.article(c.item);
                *counts.entry((a.category.clone(), a.locality)).or_default() += 1;
                total += 1;
            }
            counts
                .into_iter()
                .map(|(k, v)| (k, v as f64 / total.max(1) as f64))
                .collect::<CellShares>()
        };
        [shares(&self.train), shares(&self.validation), shares(&self.test)]
    }
}

/// Splits sessions by first-click time quantiles.
///
/// Nominal cut points are `floor(n * train)` and `floor(n * (train + val))`.
/// A cut is pushed forward while the next session starts at or before the
/// latest click already assigned, so no later split ever overlaps an earlier
/// one in time.
pub fn chronological_split(sessions: &[Session], ratios: SplitRatios) -> Result<SplitBundle, CorpusError> {
    ratios.validate()?;
    let n = sessions.len();
    if n < 3 {
        return Err(CorpusError::InsufficientSessions(n));
    }
    let mut order: Vec<&Session> = sessions.iter().filter(|s| !s.is_empty()).collect();
    order.sort_by_key(|s| s.first_timestamp());
    let n = order.len();

    let nominal = |frac: f64| ((n as f64 * frac) + 1e-9).floor() as usize;
    let extend = |mut cut: usize| -> (usize, i64) {
        let mut end = order[..cut].iter().map(|s| s.last_timestamp()).max().unwrap_or(i64::MIN);
        while cut < n && order[cut].first_timestamp() <= end {
            end = end.max(order[cut].last_timestamp());
            cut += 1;
        }
        (cut, end)
    };
    let (cut_train, t_train_end) = extend(nominal(ratios.train).min(n));
    let (cut_val, t_val_end) = extend(nominal(ratios.train + ratios.validation).clamp(cut_train, n));

    let train: Vec<Session> = order[..cut_train].iter().map(|s| (*s).clone()).collect();
    let validation: Vec<Session> = order[cut_train..cut_val].iter().map(|s| (*s).clone()).collect();
    let test: Vec<Session> = order[cut_val..].iter().map(|s| (*s).clone()).collect();

    let vocab: BTreeSet<ItemId> = train.iter().flat_map(|s| s.clicks.iter().map(|c| c.item)).collect();
    let unseen_items = validation
        .iter()
        .chain(&test)
        .flat_map(|s| s.clicks.iter().map(|c| c.item))
        .filter(|i| !vocab.contains(i))
        .collect();

    Ok(SplitBundle {
        train,
        validation,
        test,
        boundaries: (t_train_end, t_val_end.max(t_train_end)),
        unseen_items,
    })
}
