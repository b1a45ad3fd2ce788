//! Next-click evaluation: hit rate at K and catalog coverage.

use std::cell::Cell;
use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;
use std::io::Write;

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{ItemId, Session};
use crate::fusion::{fuse_score, mean_rank_order, ExpertPanel, FusionModel};
use crate::rng::{derive, rng_from};
use crate::scoring::{top_k, Scorer};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("reports were computed on different event sets or cutoffs")]
    MismatchedEventSets,
    #[error("need at least two reports to compare")]
    TooFewReports,
    #[error("cutoffs must be non-empty, positive and ascending")]
    InvalidCutoffs,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const DEFAULT_KS: [usize; 3] = [10, 20, 50];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PredictionEvent {
    pub session_id: String,
    pub prefix: Vec<ItemId>,
    pub truth: ItemId,
}

/// One event per position `t ≥ 1` (prefix `clicks[..t]`, truth `clicks[t]`),
/// or only the final click of each session when `last_click_only`.
pub fn enumerate_events(sessions: &[Session], last_click_only: bool) -> Vec<PredictionEvent> {
    let mut out = Vec::new();
    for s in sessions {
        let items = s.items();
        let first = if last_click_only { items.len().saturating_sub(1).max(1) } else { 1 };
        for t in first..items.len() {
            out.push(PredictionEvent {
                session_id: s.id.clone(),
                prefix: items[..t].to_vec(),
                truth: items[t],
            });
        }
    }
    out
}

/// SHA-256 over session ids, prefixes and truths.
pub fn events_fingerprint(events: &[PredictionEvent]) -> String {
    let mut h = Sha256::new();
    for e in events {
        h.update(e.session_id.as_bytes());
        h.update([0xff]);
        for i in &e.prefix {
            h.update(i.0.to_le_bytes());
        }
        h.update([0xfe]);
        h.update(e.truth.0.to_le_bytes());
    }
    hex::encode(h.finalize())
}

pub fn hit_at_k(ranked: &[ItemId], truth: ItemId, k: usize) -> bool {
    ranked.iter().take(k).any(|i| *i == truth)
}

/// A model producing a top-`k` list drawn from `pool`.
pub trait Recommender {
    fn recommend(&self, prefix: &[ItemId], pool: &[ItemId], k: usize) -> Vec<ItemId>;
}

/// Ranks the pool by a [`Scorer`]; OOV candidates and unscorable prefixes
/// score negative infinity, so ties fall back to item order.
pub struct ScorerRecommender<'a, S: Scorer + ?Sized>(pub &'a S);

impl<S: Scorer + ?Sized> Recommender for ScorerRecommender<'_, S> {
    fn recommend(&self, prefix: &[ItemId], pool: &[ItemId], k: usize) -> Vec<ItemId> {
        let scores = self.0.score(prefix, pool).unwrap_or_else(|_| vec![None; pool.len()]);
        let scored = pool
            .iter()
            .zip(scores)
            .map(|(i, s)| (*i, s.unwrap_or(f64::NEG_INFINITY)))
            .collect();
        top_k(scored, k)
    }
}

pub struct MeanRankRecommender<'a, P: ExpertPanel + ?Sized>(pub &'a P);

impl<P: ExpertPanel + ?Sized> Recommender for MeanRankRecommender<'_, P> {
    fn recommend(&self, prefix: &[ItemId], pool: &[ItemId], k: usize) -> Vec<ItemId> {
        let mut out = mean_rank_order(self.0, prefix, pool);
        out.truncate(k);
        out
    }
}

pub struct FusionRecommender<'a, P: ExpertPanel + ?Sized> {
    pub model: &'a FusionModel,
    pub panel: &'a P,
}

impl<P: ExpertPanel + ?Sized> Recommender for FusionRecommender<'_, P> {
    fn recommend(&self, prefix: &[ItemId], pool: &[ItemId], k: usize) -> Vec<ItemId> {
        fuse_score(self.model, self.panel, prefix, pool)
            .into_iter()
            .take(k)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Uniformly shuffled pool; each call draws from a fresh derived stream.
pub struct RandomRecommender {
    seed: u64,
    calls: Cell<u64>,
}

impl RandomRecommender {
    pub fn new(seed: u64) -> Self {
        RandomRecommender { seed, calls: Cell::new(0) }
    }
}

impl Recommender for RandomRecommender {
    fn recommend(&self, _: &[ItemId], pool: &[ItemId], k: usize) -> Vec<ItemId> {
        let n = self.calls.get();
        self.calls.set(n + 1);
        let mut rng = rng_from(derive(self.seed, &[n]));
        pool.choose_multiple(&mut rng, k.min(pool.len())).copied().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub ks: Vec<usize>,
    /// Aligned with `ks`.
    pub hit_rates: Vec<f64>,
    /// Fraction of the catalog appearing in any top-`max(ks)` list.
    pub coverage: f64,
    pub n_events: usize,
    pub events_fingerprint: String,
}

impl MetricsReport {
    pub fn hr(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|x| *x == k).map(|i| self.hit_rates[i])
    }

    pub fn is_monotone(&self) -> bool {
        self.hit_rates.windows(2).all(|w| w[0] <= w[1])
    }
}

/// Ranks, for every event, the train vocabulary minus prefix items. Truths
/// outside the vocabulary are misses.
pub fn evaluate<R: Recommender + ?Sized>(
    name: &str,
    recommender: &R,
    events: &[PredictionEvent],
    vocabulary: &BTreeSet<ItemId>,
    catalog_size: usize,
    ks: &[usize],
) -> Result<MetricsReport, EvalError> {
    if ks.is_empty() || ks[0] == 0 || ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EvalError::InvalidCutoffs);
    }
    let k_max = *ks.last().unwrap();
    let mut hits = vec![0usize; ks.len()];
    let mut shown: HashSet<ItemId> = HashSet::new();
    let mut pool = Vec::with_capacity(vocabulary.len());
    for e in events {
        let prefix: HashSet<ItemId> = e.prefix.iter().copied().collect();
        pool.clear();
        pool.extend(vocabulary.iter().copied().filter(|i| !prefix.contains(i)));
        let list = recommender.recommend(&e.prefix, &pool, k_max);
        if let Some(rank) = list.iter().take(k_max).position(|i| *i == e.truth) {
            for (h, k) in hits.iter_mut().zip(ks) {
                if rank < *k {
                    *h += 1;
                }
            }
        }
        shown.extend(list.into_iter().take(k_max));
    }
    let n = events.len().max(1) as f64;
    Ok(MetricsReport {
        model: name.to_string(),
        ks: ks.to_vec(),
        hit_rates: hits.iter().map(|h| *h as f64 / n).collect(),
        coverage: shown.len() as f64 / catalog_size.max(1) as f64,
        n_events: events.len(),
        events_fingerprint: events_fingerprint(events),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonTable {
    pub ks: Vec<usize>,
    pub reports: Vec<MetricsReport>,
    /// `best[r][j]`: report `r` attains the maximum HR at `ks[j]`.
    pub best: Vec<Vec<bool>>,
}

pub fn compare_report(reports: &[MetricsReport]) -> Result<ComparisonTable, EvalError> {
    if reports.len() < 2 {
        return Err(EvalError::TooFewReports);
    }
    let first = &reports[0];
    if reports
        .iter()
        .any(|r| r.ks != first.ks || r.n_events != first.n_events || r.events_fingerprint != first.events_fingerprint)
    {
        return Err(EvalError::MismatchedEventSets);
    }
    let maxima: Vec<f64> = (0..first.ks.len())
        .map(|j| reports.iter().map(|r| r.hit_rates[j]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let best = reports
        .iter()
        .map(|r| r.hit_rates.iter().zip(&maxima).map(|(v, m)| v == m).collect())
        .collect();
    Ok(ComparisonTable {
        ks: first.ks.clone(),
        reports: reports.to_vec(),
        best,
    })
}

impl ComparisonTable {
    /// Aligned plain-text table; the best value per HR column is wrapped in `**`.
    pub fn render(&self) -> String {
        self.render_sections(&[])
    }

    /// Like [`render`](Self::render), with a caption line before the row at
    /// each `(row_index, caption)`.
    pub fn render_sections(&self, sections: &[(usize, &str)]) -> String {
        let mut header = vec!["Model".to_string()];
        header.extend(self.ks.iter().map(|k| format!("HR@{k}")));
        header.push("Coverage".into());
        let rows: Vec<Vec<String>> = self
            .reports
            .iter()
            .zip(&self.best)
            .map(|(r, best)| {
                let mut row = vec![r.model.clone()];
                row.extend(r.hit_rates.iter().zip(best).map(|(v, b)| {
                    if *b {
                        format!("**{v:.4}**")
                    } else {
                        format!("{v:.4}")
                    }
                }));
                row.push(format!("{:.4}", r.coverage));
                row
            })
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|c| std::iter::once(&header).chain(&rows).map(|r| r[c].len()).max().unwrap())
            .collect();
        let mut out = String::new();
        let line = |out: &mut String, cells: &[String]| {
            let parts: Vec<String> = cells
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (s, w))| if c == 0 { format!("{s:<w$}") } else { format!("{s:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", parts.join(" | ").trim_end());
        };
        line(&mut out, &header);
        let _ = writeln!(
            out,
            "{}",
            widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-|-")
        );
        let rule = widths.iter().sum::<usize>() + 3 * (widths.len() - 1);
        for (i, r) in rows.iter().enumerate() {
            for (_, caption) in sections.iter().filter(|(at, _)| *at == i) {
                if i > 0 {
                    let _ = writeln!(out, "{}", "-".repeat(rule));
                }
                let _ = writeln!(out, "{caption}");
            }
            line(&mut out, r);
        }
        let _ = writeln!(out, "n_events = {}", self.reports[0].n_events);
        out
    }
}

/// `model,K,HR,coverage,n_events`, one row per model and cutoff.
pub fn write_reports_csv<W: Write>(writer: W, reports: &[MetricsReport]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["model", "K", "HR", "coverage", "n_events"])
        .map_err(std::io::Error::from)?;
    for r in reports {
        for (k, hr) in r.ks.iter().zip(&r.hit_rates) {
            w.write_record([
                r.model.clone(),
                k.to_string(),
                format!("{hr:.6}"),
                format!("{:.6}", r.coverage),
                r.n_events.to_string(),
            ])
            .map_err(std::io::Error::from)?;
        }
    }
    w.flush()?;
    Ok(())
}
