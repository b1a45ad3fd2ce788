//! Brute-force reference implementations and fixtures shared by the
//! integration and acceptance tests.

#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};

use hybridrec_core::corpus::{Article, Catalog, Click, ItemId, Locality, Session};
use hybridrec_core::fusion::{mean_rank_fuse, ExpertPanel};
use hybridrec_core::rng::{derive, rng_from};
use hybridrec_core::ItemScore;
use rand::Rng;

pub fn session(id: &str, items: &[u32], last_timestamp: i64) -> Session {
    let n = items.len() as i64;
    Session {
        id: id.into(),
        user_id: format!("u-{id}"),
        clicks: items
            .iter()
            .enumerate()
            .map(|(t, &i)| Click {
                item: ItemId(i),
                timestamp: last_timestamp - (n - 1 - t as i64),
            })
            .collect(),
    }
}

pub fn news_catalog(n: usize) -> Catalog {
    Catalog::from_articles(
        (0..n)
            .map(|i| Article {
                id: format!("a{i:04}"),
                category: "News".into(),
                locality: if i % 2 == 0 { Locality::Local } else { Locality::NonLocal },
            })
            .collect(),
    )
    .unwrap()
}

/// Session-kNN scores computed directly from the definition: cosine
/// similarity between binary item sets, the `k` most similar sessions with
/// ties going to the more recent one, and a candidate's score the sum of
/// similarities of the neighbours containing it.
pub fn sknn_oracle(sessions: &[Session], k: usize, prefix: &[ItemId], candidates: &[ItemId]) -> Vec<f64> {
    let query: BTreeSet<ItemId> = prefix.iter().copied().collect();
    let stored: Vec<(i64, usize, BTreeSet<ItemId>)> = sessions
        .iter()
        .enumerate()
        .filter(|(_, s)| !s.clicks.is_empty())
        .map(|(pos, s)| (s.clicks.last().unwrap().timestamp, pos, s.clicks.iter().map(|c| c.item).collect()))
        .collect();
    let mut sims: Vec<(f64, i64, usize, &BTreeSet<ItemId>)> = stored
        .iter()
        .map(|(ts, pos, set)| {
            let shared = query.intersection(set).count() as f64;
            let sim = if shared == 0.0 {
                0.0
            } else {
                shared / (query.len() as f64 * set.len() as f64).sqrt()
            };
            (sim, *ts, *pos, set)
        })
        .filter(|(sim, ..)| *sim > 0.0)
        .collect();
    sims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(b.1.cmp(&a.1)).then(b.2.cmp(&a.2)));
    sims.truncate(k);
    candidates
        .iter()
        .map(|c| sims.iter().filter(|(_, _, _, set)| set.contains(c)).map(|(s, ..)| *s).sum())
        .collect()
}

/// At most 20 short sessions over a 16-item universe with coarse timestamps,
/// so both overlap ties and recency ties occur.
pub fn random_sknn_fixture(seed: u64) -> (Vec<Session>, usize, Vec<ItemId>) {
    let mut rng = rng_from(seed);
    let n_sessions = rng.random_range(1..=20);
    let sessions = (0..n_sessions)
        .map(|i| {
            let len = rng.random_range(1..=8);
            let items: Vec<u32> = (0..len).map(|_| rng.random_range(0..16)).collect();
            session(&format!("s{i}"), &items, rng.random_range(0..6) * 100)
        })
        .collect();
    let k = rng.random_range(1..=25);
    let plen = rng.random_range(1..=5);
    let prefix = (0..plen).map(|_| ItemId(rng.random_range(0..20))).collect();
    (sessions, k, prefix)
}

/// Fractional ranks under one expert, computed by walking the sorted list
/// and averaging the positions of each run of equal scores. OOV candidates
/// rank `|candidates| + 1`.
pub fn fractional_ranks(scores: &[ItemScore]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).filter(|&i| scores[i].is_some()).collect();
    order.sort_by(|&a, &b| scores[b].unwrap().partial_cmp(&scores[a].unwrap()).unwrap());
    let mut ranks = vec![(scores.len() + 1) as f64; scores.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && scores[order[end + 1]] == scores[order[start]] {
            end += 1;
        }
        let shared = ((start + 1) + (end + 1)) as f64 / 2.0;
        for &i in &order[start..=end] {
            ranks[i] = shared;
        }
        start = end + 1;
    }
    ranks
}

/// Candidates by ascending mean fractional rank, ties by ascending id.
pub fn mean_rank_oracle(per_expert: &[Vec<ItemScore>], candidates: &[ItemId]) -> Vec<(ItemId, f64)> {
    let mut totals = vec![0.0; candidates.len()];
    for scores in per_expert {
        for (t, r) in totals.iter_mut().zip(fractional_ranks(scores)) {
            *t += r;
        }
    }
    let n = per_expert.len().max(1) as f64;
    let mut out: Vec<(ItemId, f64)> = candidates.iter().copied().zip(totals.into_iter().map(|t| t / n)).collect();
    out.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    out
}

/// Every length-`n` table over `values`.
pub fn all_score_tables(n: usize, values: &[ItemScore]) -> Vec<Vec<ItemScore>> {
    let mut out = vec![Vec::new()];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|t| {
                values.iter().map(move |v| {
                    let mut t = t.clone();
                    t.push(*v);
                    t
                })
            })
            .collect();
    }
    out
}

/// Shuffled, non-contiguous ids so the id tie-break is exercised.
pub fn candidate_ids(n: usize) -> Vec<ItemId> {
    [7u32, 2, 11, 5, 0, 9][..n].iter().map(|&i| ItemId(i)).collect()
}

/// Calls `f` with every panel of `n_experts` columns drawn from `columns`.
pub fn for_each_panel(columns: &[Vec<ItemScore>], n_experts: u32, mut f: impl FnMut(&[Vec<ItemScore>])) {
    let n = columns.len();
    for code in 0..n.pow(n_experts) {
        let panel: Vec<Vec<ItemScore>> = (0..n_experts)
            .map(|e| columns[code / n.pow(e) % n].clone())
            .collect();
        f(&panel);
    }
}

/// Whether the library's mean-rank fusion equals the oracle exactly.
pub fn mean_rank_agrees(per_expert: &[Vec<ItemScore>], candidates: &[ItemId]) -> bool {
    let panel = TablePanel::new(candidates, per_expert);
    mean_rank_fuse(&panel, &[], candidates) == mean_rank_oracle(per_expert, candidates)
}

/// Fixed score tables; `None` is OOV. Scores ignore the prefix.
pub struct TablePanel {
    pub tables: Vec<HashMap<ItemId, ItemScore>>,
}

impl TablePanel {
    pub fn new(candidates: &[ItemId], per_expert: &[Vec<ItemScore>]) -> Self {
        TablePanel {
            tables: per_expert
                .iter()
                .map(|s| candidates.iter().copied().zip(s.iter().copied()).collect())
                .collect(),
        }
    }
}

impl ExpertPanel for TablePanel {
    fn n_experts(&self) -> usize {
        self.tables.len()
    }

    fn expert_scores(&self, i: usize, _: &[ItemId], candidates: &[ItemId]) -> Vec<ItemScore> {
        candidates.iter().map(|c| self.tables[i].get(c).copied().flatten()).collect()
    }

    fn fingerprint(&self) -> String {
        format!("table/{}", self.tables.len())
    }
}

/// Two experts over known sessions. Expert 0 scores each candidate with
/// uniform noise in `[0, 0.5)` plus 1 when the candidate is the true next
/// item of the prefix; expert 1 is noise only.
pub struct OffsetPanel {
    pub seed: u64,
    truth: HashMap<Vec<ItemId>, ItemId>,
}

impl OffsetPanel {
    fn noise(&self, expert: u64, prefix: &[ItemId], item: ItemId) -> f64 {
        let mut parts = vec![expert, item.0 as u64];
        parts.extend(prefix.iter().map(|i| i.0 as u64));
        rng_from(derive(self.seed, &parts)).random_range(0.0..0.5)
    }
}

impl ExpertPanel for OffsetPanel {
    fn n_experts(&self) -> usize {
        2
    }

    fn expert_scores(&self, i: usize, prefix: &[ItemId], candidates: &[ItemId]) -> Vec<ItemScore> {
        let truth = self.truth.get(prefix).copied();
        candidates
            .iter()
            .map(|&c| {
                let offset = if i == 0 && Some(c) == truth { 1.0 } else { 0.0 };
                Some(self.noise(i as u64, prefix, c) + offset)
            })
            .collect()
    }

    fn fingerprint(&self) -> String {
        format!("offset/{}", self.seed)
    }
}

/// Catalog, sessions and panel for the separable fusion fixture. Sessions
/// have distinct first items and no repeats, so each prefix has one truth.
pub fn separable_fixture(seed: u64) -> (Catalog, Vec<Session>, OffsetPanel) {
    let catalog = news_catalog(300);
    let mut rng = rng_from(seed);
    let mut truth = HashMap::new();
    let sessions: Vec<Session> = (0..40u32)
        .map(|s| {
            let mut items = vec![s];
            while items.len() < 6 {
                let x = rng.random_range(40..300);
                if !items.contains(&x) {
                    items.push(x);
                }
            }
            for p in 1..items.len() {
                truth.insert(items[..p].iter().map(|&i| ItemId(i)).collect(), ItemId(items[p]));
            }
            session(&format!("s{s:02}"), &items, 1000 + s as i64 * 10)
        })
        .collect();
    (catalog, sessions, OffsetPanel { seed, truth })
}
