//! Session-based k-nearest-neighbour recommender.
//!
//! Stored sessions are binary item sets. For a query prefix the candidate
//! neighbours are the sessions sharing at least one item with it, capped at
//! the `sample_size` most recent; similarity is the cosine between binary
//! set vectors and each item scores the summed similarity of the top-k
//! neighbours that contain it.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Catalog, ItemId, Session};
use crate::scoring::{rank_all, ItemScore, ScoreError, Scorer};

#[derive(Debug, Error)]
pub enum SknnError {
    #[error("no training sessions")]
    EmptyTrainingSet,
    #[error("invalid sknn config: {0}")]
    ConfigInvalid(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SknnConfig {
    pub k: usize,
    pub sample_size: usize,
}

impl Default for SknnConfig {
    fn default() -> Self {
        SknnConfig {
            k: 100,
            sample_size: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct StoredSession {
    id: String,
    last_timestamp: i64,
    items: Vec<ItemId>,
}

#[derive(Clone, Debug)]
pub struct SknnModel {
    config: SknnConfig,
    /// Oldest first; the position is the recency rank.
    sessions: Vec<StoredSession>,
    index: HashMap<ItemId, Vec<u32>>,
}

impl SknnModel {
    pub fn fit(sessions: &[Session], config: SknnConfig) -> Result<Self, SknnError> {
        if config.k == 0 || config.sample_size == 0 {
            return Err(SknnError::ConfigInvalid("k and sample_size must be >= 1".into()));
        }
        let stored = sessions
            .iter()
            .filter(|s| !s.is_empty())
            .map(|s| {
                let mut items = s.items();
                items.sort_unstable();
                items.dedup();
                StoredSession {
                    id: s.id.clone(),
                    last_timestamp: s.last_timestamp(),
                    items,
                }
            })
            .collect();
        Self::from_store(stored, config)
    }

    fn from_store(mut sessions: Vec<StoredSession>, config: SknnConfig) -> Result<Self, SknnError> {
        if sessions.is_empty() {
            return Err(SknnError::EmptyTrainingSet);
        }
        // Stable: equal timestamps keep training order.
        sessions.sort_by_key(|s| s.last_timestamp);
        let mut index: HashMap<ItemId, Vec<u32>> = HashMap::new();
        for (pos, s) in sessions.iter().enumerate() {
            for &item in &s.items {
                index.entry(item).or_default().push(pos as u32);
            }
        }
        Ok(SknnModel {
            config,
            sessions,
            index,
        })
    }

    pub fn config(&self) -> SknnConfig {
        self.config
    }

    pub fn n_sessions(&self) -> usize {
        self.sessions.len()
    }

    /// Stored sessions containing `item`, oldest first.
    pub fn postings(&self, item: ItemId) -> &[u32] {
        self.index.get(&item).map_or(&[], Vec::as_slice)
    }

    pub fn vocabulary(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.index.keys().copied()
    }

    /// Top-k neighbour sessions as `(store position, similarity)`.
    pub fn neighbors(&self, prefix: &[ItemId]) -> Vec<(u32, f64)> {
        let mut query: Vec<ItemId> = prefix.to_vec();
        query.sort_unstable();
        query.dedup();
        if query.is_empty() {
            return Vec::new();
        }

        let mut overlap: HashMap<u32, u32> = HashMap::new();
        for item in &query {
            for &s in self.postings(*item) {
                *overlap.entry(s).or_default() += 1;
            }
        }
        let mut candidates: Vec<(u32, u32)> = overlap.into_iter().collect();
        candidates.sort_unstable_by_key(|&(s, _)| std::cmp::Reverse(s));
        candidates.truncate(self.config.sample_size);

        let q_norm = (query.len() as f64).sqrt();
        let mut scored: Vec<(u32, f64)> = candidates
            .into_iter()
            .map(|(s, shared)| {
                let s_len = self.sessions[s as usize].items.len() as f64;
                (s, shared as f64 / (q_norm * s_len.sqrt()))
            })
            .collect();
        // Similarity descending, then most recent first.
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(b.0.cmp(&a.0)));
        scored.truncate(self.config.k);
        scored
    }

    fn accumulate(&self, prefix: &[ItemId]) -> HashMap<ItemId, f64> {
        let mut acc: HashMap<ItemId, f64> = HashMap::new();
        for (s, sim) in self.neighbors(prefix) {
            for &item in &self.sessions[s as usize].items {
                *acc.entry(item).or_default() += sim;
            }
        }
        acc
    }

    /// Similarity-weighted neighbour counts; candidates seen in no neighbour score 0.
    pub fn score(&self, prefix: &[ItemId], candidates: &[ItemId]) -> Vec<f64> {
        let acc = self.accumulate(prefix);
        candidates.iter().map(|c| acc.get(c).copied().unwrap_or(0.0)).collect()
    }

    /// Top-`k` items from neighbour sessions, prefix items excluded.
    pub fn recommend(&self, prefix: &[ItemId], k: usize) -> Vec<ItemId> {
        let exclude: HashSet<ItemId> = prefix.iter().copied().collect();
        let scored: Vec<(ItemId, f64)> = self
            .accumulate(prefix)
            .into_iter()
            .filter(|(i, _)| !exclude.contains(i))
            .collect();
        let mut ranked = rank_all(scored);
        ranked.truncate(k);
        ranked
    }

    /// Writes `sessions.csv` (session store) and `params.toml` into `dir`.
    pub fn save(&self, dir: &Path, catalog: &Catalog) -> Result<(), SknnError> {
        fs::create_dir_all(dir)?;
        self.write_sessions(fs::File::create(dir.join("sessions.csv"))?, catalog)?;
        fs::write(dir.join("params.toml"), self.params_toml()?)?;
        Ok(())
    }

    /// The session store as CSV, oldest session first.
    pub fn write_sessions<W: Write>(&self, writer: W, catalog: &Catalog) -> Result<(), SknnError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["session_id", "last_timestamp", "article_id"])?;
        for s in &self.sessions {
            let ts = s.last_timestamp.to_string();
            for item in &s.items {
                w.write_record([s.id.as_str(), ts.as_str(), catalog.article(*item).id.as_str()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn params_toml(&self) -> Result<String, SknnError> {
        toml::to_string(&self.config).map_err(|e| SknnError::Checkpoint(e.to_string()))
    }

    pub fn load(dir: &Path, catalog: &Catalog) -> Result<Self, SknnError> {
        let params = fs::read_to_string(dir.join("params.toml"))?;
        let config: SknnConfig = toml::from_str(&params).map_err(|e| SknnError::Checkpoint(e.to_string()))?;
        let mut rdr = csv::Reader::from_path(dir.join("sessions.csv"))?;
        let mut sessions: Vec<StoredSession> = Vec::new();
        for record in rdr.records() {
            let record = record?;
            let (sid, ts, art) = (&record[0], &record[1], &record[2]);
            let item = catalog
                .lookup(art)
                .ok_or_else(|| SknnError::Checkpoint(format!("unknown article `{art}`")))?;
            let ts: i64 = ts.parse().map_err(|_| SknnError::Checkpoint(format!("bad timestamp `{ts}`")))?;
            match sessions.last_mut() {
                Some(last) if last.id == sid => last.items.push(item),
                _ => sessions.push(StoredSession {
                    id: sid.to_string(),
                    last_timestamp: ts,
                    items: vec![item],
                }),
            }
        }
        Self::from_store(sessions, config)
    }
}

impl Scorer for SknnModel {
    fn score(&self, prefix: &[ItemId], candidates: &[ItemId]) -> Result<Vec<ItemScore>, ScoreError> {
        if !prefix.iter().any(|i| self.index.contains_key(i)) {
            return Err(ScoreError::EmptyPrefixAfterFiltering);
        }
        let acc = self.accumulate(prefix);
        Ok(candidates
            .iter()
            .map(|c| {
                if self.index.contains_key(c) {
                    Some(acc.get(c).copied().unwrap_or(0.0))
                } else {
                    None
                }
            })
            .collect())
    }

    fn contains(&self, item: ItemId) -> bool {
        self.index.contains_key(&item)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Click;

    fn session(id: &str, items: &[u32], ts: i64) -> Session {
        Session {
            id: id.into(),
            user_id: "u".into(),
            clicks: items
                .iter()
                .map(|&i| Click {
                    item: ItemId(i),
                    timestamp: ts,
                })
                .collect(),
        }
    }

    const A: ItemId = ItemId(0);
    const B: ItemId = ItemId(1);
    const C: ItemId = ItemId(2);
    const D: ItemId = ItemId(3);

    #[test]
    fn fit_indexes_items() {
        let m = SknnModel::fit(&[session("s1", &[0, 1], 1)], SknnConfig::default()).unwrap();
        assert_eq!(m.postings(A), &[0]);
        assert_eq!(m.postings(B), &[0]);
    }

    #[test]
    fn duplicate_clicks_indexed_once() {
        let m = SknnModel::fit(&[session("s1", &[0, 1, 0, 0], 1)], SknnConfig::default()).unwrap();
        assert_eq!(m.postings(A), &[0]);
        assert_eq!(m.sessions[0].items.len(), 2);
    }

    #[test]
    fn empty_training_set() {
        assert!(matches!(
            SknnModel::fit(&[], SknnConfig::default()),
            Err(SknnError::EmptyTrainingSet)
        ));
    }

    #[test]
    fn hand_cosine() {
        let m = SknnModel::fit(&[session("s1", &[0, 1], 1)], SknnConfig::default()).unwrap();
        let s = m.score(&[A], &[B, C]);
        assert!((s[0] - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(s[1], 0.0);
    }

    #[test]
    fn identical_prefix_has_similarity_one() {
        let m = SknnModel::fit(&[session("s1", &[0, 1, 2], 1)], SknnConfig::default()).unwrap();
        let s = m.score(&[A, B, C], &[A, B, C]);
        assert!(s.iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn disjoint_candidates_score_zero() {
        let m = SknnModel::fit(&[session("s1", &[0, 1], 1)], SknnConfig::default()).unwrap();
        assert_eq!(m.score(&[A], &[ItemId(7), ItemId(8)]), vec![0.0, 0.0]);
    }

    #[test]
    fn recommend_tie_break_and_truncation() {
        // b and c co-occur with a equally; d only through a weaker neighbour.
        let m = SknnModel::fit(
            &[session("s1", &[0, 2, 1], 1), session("s2", &[0, 3, 4, 5, 6], 2)],
            SknnConfig::default(),
        )
        .unwrap();
        let rec = m.recommend(&[A], 2);
        assert_eq!(rec, vec![B, C]);
        assert_eq!(m.recommend(&[A], 100).len(), 6);
    }

    #[test]
    fn single_neighbour_ranks_its_items() {
        let m = SknnModel::fit(&[session("s1", &[0, 3, 1, 2], 1)], SknnConfig::default()).unwrap();
        assert_eq!(m.recommend(&[A], 10), vec![B, C, D]);
    }

    #[test]
    fn sample_size_keeps_most_recent() {
        let cfg = SknnConfig { k: 10, sample_size: 1 };
        let m = SknnModel::fit(&[session("old", &[0, 1], 1), session("new", &[0, 2], 5)], cfg).unwrap();
        let s = m.score(&[A], &[B, C]);
        assert_eq!(s[0], 0.0);
        assert!(s[1] > 0.0);
    }

    #[test]
    fn scorer_marks_oov_and_empty_prefix() {
        let m = SknnModel::fit(&[session("s1", &[0, 1], 1)], SknnConfig::default()).unwrap();
        let out = Scorer::score(&m, &[A], &[B, ItemId(9)]).unwrap();
        assert!(out[0].is_some());
        assert_eq!(out[1], None);
        assert_eq!(
            Scorer::score(&m, &[ItemId(9)], &[B]),
            Err(ScoreError::EmptyPrefixAfterFiltering)
        );
    }

    #[test]
    fn checkpoint_round_trip() {
        use crate::corpus::{Article, Locality};
        let catalog = Catalog::from_articles(
            (0..5)
                .map(|i| Article {
                    id: format!("a{i}"),
                    category: "News".into(),
                    locality: Locality::Local,
                })
                .collect(),
        )
        .unwrap();
        let m = SknnModel::fit(
            &[session("s1", &[0, 1], 3), session("s2", &[1, 2, 4], 2)],
            SknnConfig { k: 7, sample_size: 9 },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path(), &catalog).unwrap();
        let back = SknnModel::load(dir.path(), &catalog).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(back.sessions, m.sessions);
    }
}
