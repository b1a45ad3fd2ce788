//! Synthetic local-news click logs.
//!
//! The catalog is split into (category × locality) cells. Each user draws a
//! preference over cells from a Dirichlet centred on the configured cell
//! shares. Within a session every click first picks a cell from that
//! preference; the item then either follows the cell's sparse item-to-item
//! transition table from the last item the session visited in that cell, or
//! is drawn from the cell's Zipf popularity.

use std::collections::{BTreeMap, HashSet};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Gamma, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{sessions_to_interactions, Article, Catalog, Click, Interaction, ItemId, Locality, Session};
use crate::rng::{derive, rng_from, Rng};

#[derive(Debug, Error)]
pub enum SyngenError {
    #[error("invalid generator config: {0}")]
    ConfigInvalid(String),
    #[error("config parse error: {0}")]
    Parse(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellCounts {
    pub local: usize,
    pub nonlocal: usize,
}

/// Mean and negative-binomial dispersion of a count distribution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dispersed {
    pub mean: f64,
    pub dispersion: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub n_users: usize,
    pub n_items_per_cell: BTreeMap<String, CellCounts>,
    pub category_proportions: BTreeMap<String, f64>,
    pub local_fraction_per_category: BTreeMap<String, f64>,
    /// Clicks per session; lengths are `2 + NB`, so `mean >= 2`.
    pub session_length: Dispersed,
    /// Sessions per user; counts are `1 + NB`, so `mean >= 1`.
    pub sessions_per_user: Dispersed,
    pub item_popularity_exponent: f64,
    pub segment_affinity_concentration: f64,
    pub within_cell_transition_weight: f64,
    pub successors_per_item: usize,
    /// Successors of an item are drawn from the next `successor_window`
    /// items of a per-cell random cyclic order; 0 draws them from the whole cell.
    pub successor_window: usize,
    pub start_timestamp: i64,
    pub horizon_days: u32,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        let cats = [
            ("News", 0.55, 0.6, 660, 440),
            ("Sports", 0.25, 0.5, 250, 250),
            ("Life and Culture", 0.20, 0.7, 280, 120),
        ];
        GeneratorConfig {
            n_users: 2000,
            n_items_per_cell: cats
                .iter()
                .map(|&(c, _, _, l, n)| (c.to_string(), CellCounts { local: l, nonlocal: n }))
                .collect(),
            category_proportions: cats.iter().map(|&(c, p, _, _, _)| (c.to_string(), p)).collect(),
            local_fraction_per_category: cats.iter().map(|&(c, _, f, _, _)| (c.to_string(), f)).collect(),
            session_length: Dispersed {
                mean: 8.0,
                dispersion: 2.0,
            },
            sessions_per_user: Dispersed {
                mean: 4.0,
                dispersion: 1.5,
            },
            item_popularity_exponent: 1.0,
            segment_affinity_concentration: 1.0,
            within_cell_transition_weight: 0.7,
            successors_per_item: 10,
            successor_window: 15,
            start_timestamp: 1_577_836_800,
            horizon_days: 120,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn from_toml(text: &str) -> Result<Self, SyngenError> {
        let cfg: GeneratorConfig = toml::from_str(text).map_err(|e| SyngenError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("generator config serializes")
    }

    /// Expected clicks per user under the configured count distributions.
    pub fn expected_clicks_per_user(&self) -> f64 {
        self.sessions_per_user.mean * self.session_length.mean
    }

    /// Copy with `n_users` chosen so the expected click count is `n_clicks`.
    pub fn scaled_to_clicks(&self, n_clicks: usize) -> Self {
        GeneratorConfig {
            n_users: ((n_clicks as f64 / self.expected_clicks_per_user()).ceil() as usize).max(1),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), SyngenError> {
        let bad = |m: String| Err(SyngenError::ConfigInvalid(m));
        if self.n_users == 0 {
            return bad("n_users must be positive".into());
        }
        if self.category_proportions.is_empty() {
            return bad("category_proportions is empty".into());
        }
        let sum: f64 = self.category_proportions.values().sum();
        if (sum - 1.0).abs() > 1e-9 || self.category_proportions.values().any(|p| !(*p >= 0.0)) {
            return bad(format!("category_proportions must be non-negative and sum to 1, got {sum}"));
        }
        for cat in self.category_proportions.keys() {
            match self.local_fraction_per_category.get(cat) {
                Some(f) if (0.0..=1.0).contains(f) => {}
                _ => return bad(format!("local fraction for `{cat}` missing or outside [0, 1]")),
            }
            match self.n_items_per_cell.get(cat) {
                Some(c) if c.local > 0 && c.nonlocal > 0 => {}
                _ => return bad(format!("item counts for `{cat}` missing or zero")),
            }
        }
        if self.local_fraction_per_category.len() != self.category_proportions.len()
            || self.n_items_per_cell.len() != self.category_proportions.len()
        {
            return bad("category keys differ between maps".into());
        }
        if !(self.session_length.mean >= 2.0 && self.session_length.dispersion > 0.0) {
            return bad("session_length needs mean >= 2 and positive dispersion".into());
        }
        if !(self.sessions_per_user.mean >= 1.0 && self.sessions_per_user.dispersion > 0.0) {
            return bad("sessions_per_user needs mean >= 1 and positive dispersion".into());
        }
        if !(self.item_popularity_exponent >= 0.0) {
            return bad("item_popularity_exponent must be >= 0".into());
        }
        if !(self.segment_affinity_concentration > 0.0) {
            return bad("segment_affinity_concentration must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.within_cell_transition_weight) {
            return bad("within_cell_transition_weight must lie in [0, 1]".into());
        }
        if self.successors_per_item == 0 || self.horizon_days == 0 {
            return bad("successors_per_item and horizon_days must be positive".into());
        }
        Ok(())
    }

    /// Target click share of every (category, locality) cell.
    pub fn cell_targets(&self) -> BTreeMap<(String, Locality), f64> {
        let mut out = BTreeMap::new();
        for (cat, p) in &self.category_proportions {
            let f = self.local_fraction_per_category.get(cat).copied().unwrap_or(0.0);
            out.insert((cat.clone(), Locality::Local), p * f);
            out.insert((cat.clone(), Locality::NonLocal), p * (1.0 - f));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub catalog: Catalog,
    /// Ordered by (user id, first click).
    pub sessions: Vec<Session>,
    /// Generator configuration, including the seed.
    pub provenance: GeneratorConfig,
}

impl SyntheticDataset {
    pub fn n_clicks(&self) -> usize {
        self.sessions.iter().map(Session::len).sum()
    }

    pub fn interactions(&self) -> Vec<Interaction> {
        sessions_to_interactions(&self.sessions, &self.catalog)
    }
}

struct Cell {
    share: f64,
    items: Vec<ItemId>,
    popularity: WeightedIndex<f64>,
    successors: Vec<(Vec<ItemId>, WeightedIndex<f64>)>,
}

impl Cell {
    fn successor(&self, item: ItemId, rng: &mut Rng) -> Option<ItemId> {
        let pos = self.items.binary_search(&item).ok()?;
        let (succ, w) = &self.successors[pos];
        (!succ.is_empty()).then(|| succ[w.sample(rng)])
    }
}

const STREAM_CATALOG: u64 = u64::MAX;

fn build_cells(config: &GeneratorConfig) -> (Catalog, Vec<Cell>) {
    let mut rng = rng_from(derive(config.seed, &[STREAM_CATALOG]));
    let targets = config.cell_targets();
    let mut articles = Vec::new();
    let mut cell_members: Vec<(f64, Vec<String>)> = Vec::new();
    for ((cat, loc), share) in &targets {
        let counts = config.n_items_per_cell[cat];
        let n = if *loc == Locality::Local { counts.local } else { counts.nonlocal };
        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            let id = format!("a{:06}", articles.len());
            articles.push(Article {
                id: id.clone(),
                category: cat.clone(),
                locality: *loc,
            });
            ids.push(id);
        }
        cell_members.push((*share, ids));
    }
    let catalog = Catalog::new(config.category_proportions.keys().cloned(), articles).expect("generated catalog is valid");

    let cells = cell_members
        .into_iter()
        .map(|(share, ids)| {
            let items: Vec<ItemId> = ids.iter().map(|id| catalog.lookup(id).unwrap()).collect();
            let n = items.len();
            let mut ranks: Vec<usize> = (0..n).collect();
            ranks.shuffle(&mut rng);
            let pop_weights: Vec<f64> = ranks
                .iter()
                .map(|&r| 1.0 / ((r + 1) as f64).powf(config.item_popularity_exponent))
                .collect();
            let popularity = WeightedIndex::new(&pop_weights).expect("positive weights");
            let mut ring: Vec<usize> = (0..n).collect();
            ring.shuffle(&mut rng);
            let mut ring_pos = vec![0usize; n];
            for (p, &i) in ring.iter().enumerate() {
                ring_pos[i] = p;
            }
            let reach = match config.successor_window {
                0 => n.saturating_sub(1),
                w => w.min(n.saturating_sub(1)),
            };
            let n_succ = config.successors_per_item.min(reach);
            let successors = (0..n)
                .map(|i| {
                    let mut others: Vec<usize> = (1..=reach).map(|o| ring[(ring_pos[i] + o) % n]).collect();
                    let (chosen, _) = others.partial_shuffle(&mut rng, n_succ);
                    let succ: Vec<ItemId> = chosen.iter().map(|&j| items[j]).collect();
                    let weights: Vec<f64> = (0..succ.len()).map(|_| -(1.0 - rng.random::<f64>()).ln() + 1e-3).collect();
                    let w = if weights.is_empty() {
                        WeightedIndex::new([1.0]).unwrap()
                    } else {
                        WeightedIndex::new(&weights).unwrap()
                    };
                    (succ, w)
                })
                .collect();
            Cell {
                share,
                items,
                popularity,
                successors,
            }
        })
        .collect();
    (catalog, cells)
}

/// `offset + NB(mean − offset, dispersion)` via a Gamma–Poisson mixture.
fn shifted_nb(rng: &mut Rng, dist: Dispersed, offset: usize) -> usize {
    let excess = dist.mean - offset as f64;
    if excess <= 0.0 {
        return offset;
    }
    let lambda = Gamma::new(dist.dispersion, excess / dist.dispersion).unwrap().sample(rng);
    if lambda <= 0.0 {
        return offset;
    }
    offset + Poisson::new(lambda).map(|p| p.sample(rng) as usize).unwrap_or(0)
}

fn user_preference(rng: &mut Rng, cells: &[Cell], concentration: f64) -> Vec<f64> {
    let mut w: Vec<f64> = cells
        .iter()
        .map(|c| {
            if c.share > 0.0 {
                Gamma::new(concentration * c.share, 1.0).unwrap().sample(rng)
            } else {
                0.0
            }
        })
        .collect();
    let total: f64 = w.iter().sum();
    if total > 0.0 && total.is_finite() {
        w.iter_mut().for_each(|v| *v /= total);
        return w;
    }
    // All gamma draws underflowed: put the mass on one share-weighted cell.
    let pick = WeightedIndex::new(cells.iter().map(|c| c.share)).unwrap().sample(rng);
    (0..cells.len()).map(|i| if i == pick { 1.0 } else { 0.0 }).collect()
}

const MIN_SESSION_SPACING: i64 = 3600;

fn generate_user(config: &GeneratorConfig, cells: &[Cell], user: usize) -> Vec<Session> {
    let mut rng = rng_from(derive(config.seed, &[user as u64]));
    let pref = WeightedIndex::new(user_preference(&mut rng, cells, config.segment_affinity_concentration)).unwrap();
    let n_sessions = shifted_nb(&mut rng, config.sessions_per_user, 1);
    let horizon = config.horizon_days as i64 * 86_400;
    let mut starts: Vec<i64> = (0..n_sessions).map(|_| rng.random_range(0..horizon)).collect();
    starts.sort_unstable();

    let user_id = format!("u{user:06}");
    let mut sessions = Vec::with_capacity(n_sessions);
    let mut prev_end = i64::MIN / 2;
    for (k, start) in starts.into_iter().enumerate() {
        let len = shifted_nb(&mut rng, config.session_length, 2);
        let mut ts = config.start_timestamp + start.max(prev_end + MIN_SESSION_SPACING);
        let mut last_in_cell: Vec<Option<ItemId>> = vec![None; cells.len()];
        let mut seen: HashSet<ItemId> = HashSet::with_capacity(len);
        let mut clicks = Vec::with_capacity(len);
        for _ in 0..len {
            let c = pref.sample(&mut rng);
            let cell = &cells[c];
            let mut item = cell.items[cell.popularity.sample(&mut rng)];
            for _ in 0..20 {
                let follow = last_in_cell[c].is_some() && rng.random::<f64>() < config.within_cell_transition_weight;
                item = match last_in_cell[c].filter(|_| follow) {
                    Some(prev) => cell.successor(prev, &mut rng).unwrap_or(item),
                    None => cell.items[cell.popularity.sample(&mut rng)],
                };
                if !seen.contains(&item) {
                    break;
                }
            }
            seen.insert(item);
            last_in_cell[c] = Some(item);
            clicks.push(Click { item, timestamp: ts });
            ts += rng.random_range(20..600);
        }
        prev_end = ts - config.start_timestamp;
        sessions.push(Session {
            id: format!("{user_id}-{k:03}"),
            user_id: user_id.clone(),
            clicks,
        });
    }
    sessions
}

pub fn generate(config: &GeneratorConfig) -> Result<SyntheticDataset, SyngenError> {
    config.validate()?;
    let (catalog, cells) = build_cells(config);
    let sessions = (0..config.n_users).flat_map(|u| generate_user(config, &cells, u)).collect();
    Ok(SyntheticDataset {
        catalog,
        sessions,
        provenance: config.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellCheck {
    pub category: String,
    pub locality: Locality,
    pub target: f64,
    pub empirical: f64,
    pub abs_error: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidationReport {
    pub n_clicks: usize,
    pub tolerance: f64,
    pub cells: Vec<CellCheck>,
    pub pass: bool,
}

/// Compares empirical click shares per cell with the configured targets.
/// Cells seen in the data but absent from the config have target 0.
pub fn validate_proportions(dataset: &SyntheticDataset, config: &GeneratorConfig, tolerance: f64) -> ValidationReport {
    let mut counts: BTreeMap<(String, Locality), usize> = BTreeMap::new();
    let mut n = 0usize;
    for c in dataset.sessions.iter().flat_map(|s| &s.clicks) {
        let a = dataset.catalog.article(c.item);
        *counts.entry((a.category.clone(), a.locality)).or_default() += 1;
        n += 1;
    }
    let mut targets = config.cell_targets();
    for key in counts.keys() {
        targets.entry(key.clone()).or_insert(0.0);
    }
    let cells: Vec<CellCheck> = targets
        .into_iter()
        .map(|((category, locality), target)| {
            let empirical = counts.get(&(category.clone(), locality)).copied().unwrap_or(0) as f64 / n.max(1) as f64;
            let abs_error = (empirical - target).abs();
            CellCheck {
                category,
                locality,
                target,
                empirical,
                abs_error,
                pass: abs_error <= tolerance,
            }
        })
        .collect();
    let pass = cells.iter().all(|c| c.pass);
    ValidationReport {
        n_clicks: n,
        tolerance,
        cells,
        pass,
    }
}
