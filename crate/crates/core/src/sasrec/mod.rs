//! Self-attentive sequential recommender.
//!
//! The network lives in [`network`]; this module owns the vocabulary
//! mapping, the training loop (BCE over one sampled negative per positive,
//! Adam, early stopping on validation HR@10), scoring and checkpoints.

pub mod checkpoint;
mod gradcheck;
pub mod network;
mod ops;

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ItemId, Session};
use crate::optim::Adam;
use crate::rng::{derive, rng_from};
use crate::scoring::{ItemScore, ScoreError, Scorer};
pub use gradcheck::{grad_check, GradCheckReport};
use network::{Dims, Dropout, Network};

#[derive(Debug, Error)]
pub enum SasrecError {
    #[error("invalid sasrec config: {0}")]
    ConfigInvalid(String),
    #[error("vocabulary is empty")]
    EmptyVocabulary,
    #[error("no session with at least two in-vocabulary clicks")]
    NoTrainableEvents,
    #[error("non-finite parameter after step {0}")]
    NonFinite(usize),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SasrecConfig {
    pub max_seq_len: usize,
    pub embed_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub dropout_rate: f64,
    /// Upper bound on epochs; early stopping may end training sooner.
    pub n_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub l2_emb: f64,
    pub seed: u64,
    /// Epochs without validation HR@10 improvement before stopping.
    pub patience: usize,
    /// Validation events scored per epoch (the first ones, in session order).
    pub max_validation_events: usize,
}

impl Default for SasrecConfig {
    fn default() -> Self {
        SasrecConfig {
            max_seq_len: 50,
            embed_dim: 64,
            n_blocks: 2,
            n_heads: 1,
            dropout_rate: 0.2,
            n_epochs: 200,
            batch_size: 32,
            learning_rate: 1e-3,
            adam_betas: (0.9, 0.98),
            l2_emb: 0.0,
            seed: 0,
            patience: 3,
            max_validation_events: 2000,
        }
    }
}

impl SasrecConfig {
    pub fn validate(&self) -> Result<(), SasrecError> {
        let bad = |m: &str| Err(SasrecError::ConfigInvalid(m.to_string()));
        if self.embed_dim == 0 || self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return bad("embed_dim must be a positive multiple of n_heads");
        }
        if self.max_seq_len == 0 || self.n_blocks == 0 || self.batch_size == 0 {
            return bad("max_seq_len, n_blocks and batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) || self.l2_emb < 0.0 {
            return bad("learning_rate and l2_emb must be non-negative");
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad("adam betas must lie in [0, 1)");
        }
        Ok(())
    }

    fn dims(&self, n_items: usize) -> Dims {
        Dims {
            n_items,
            max_len: self.max_seq_len,
            d: self.embed_dim,
            heads: self.n_heads,
            blocks: self.n_blocks,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean BCE per event before any update (dropout off).
    pub initial_loss: f64,
    /// Mean training BCE per event, one entry per completed epoch.
    pub epoch_losses: Vec<f64>,
    pub validation_hr10: Vec<f64>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub n_events: usize,
}

/// Per-position hidden states of one window, `max_seq_len × embed_dim`,
/// padding rows zero.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates {
    pub values: Vec<f32>,
    /// False when the input held no real items.
    pub has_prediction: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SasrecModel {
    config: SasrecConfig,
    /// Vocabulary index `i + 1` maps to `vocab[i]`; index 0 is padding.
    vocab: Vec<ItemId>,
    lookup: HashMap<ItemId, u32>,
    net: Network<f32>,
}

struct TrainSeq {
    inputs: Vec<u32>,
    positives: Vec<u32>,
    /// Sorted distinct items of the window, excluded from negative sampling.
    seen: Vec<u32>,
}

impl SasrecModel {
    pub fn init<I: IntoIterator<Item = ItemId>>(config: SasrecConfig, vocab: I) -> Result<Self, SasrecError> {
        config.validate()?;
        let vocab: Vec<ItemId> = vocab.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
        if vocab.is_empty() {
            return Err(SasrecError::EmptyVocabulary);
        }
        let net = Network::init(config.dims(vocab.len()), &mut rng_from(derive(config.seed, &[0])));
        Ok(Self::assemble(config, vocab, net))
    }

    fn assemble(config: SasrecConfig, vocab: Vec<ItemId>, net: Network<f32>) -> Self {
        let lookup = vocab.iter().enumerate().map(|(i, &it)| (it, i as u32 + 1)).collect();
        SasrecModel {
            config,
            vocab,
            lookup,
            net,
        }
    }

    pub fn config(&self) -> &SasrecConfig {
        &self.config
    }

    pub fn vocabulary(&self) -> &[ItemId] {
        &self.vocab
    }

    pub fn network(&self) -> &Network<f32> {
        &self.net
    }

    pub fn index_of(&self, item: ItemId) -> Option<u32> {
        self.lookup.get(&item).copied()
    }

    pub fn all_finite(&self) -> bool {
        self.net.all_finite()
    }

    /// Hidden states for a window of vocabulary indices; zeros are padding.
    pub fn forward(&self, sequence: &[u32], train_mode: bool) -> HiddenStates {
        let n = self.config.max_seq_len;
        let d = self.config.embed_dim;
        let items: Vec<u32> = sequence.iter().copied().filter(|&i| i != 0).collect();
        let mut values = vec![0.0f32; n * d];
        if items.is_empty() {
            return HiddenStates {
                values,
                has_prediction: false,
            };
        }
        let mut rng = rng_from(derive(self.config.seed, &[3]));
        let dropout = train_mode.then(|| Dropout {
            rate: self.config.dropout_rate,
            rng: &mut rng,
        });
        let trace = self.net.forward(&items, dropout);
        let t = trace.len();
        values[(n - t) * d..].copy_from_slice(&trace.out);
        HiddenStates {
            values,
            has_prediction: true,
        }
    }

    /// Final-position hidden state for an item prefix; OOV items are dropped.
    pub fn encode_prefix(&self, prefix: &[ItemId]) -> Option<Vec<f32>> {
        let idx: Vec<u32> = prefix.iter().filter_map(|i| self.index_of(*i)).collect();
        if idx.is_empty() {
            return None;
        }
        let trace = self.net.forward(&idx, None);
        let d = self.config.embed_dim;
        Some(trace.out[trace.out.len() - d..].to_vec())
    }

    /// Dot product of `hidden` with every vocabulary embedding, indexed by
    /// vocabulary position (entry `i` scores `vocabulary()[i]`).
    pub fn score_vocabulary(&self, hidden: &[f32]) -> Vec<f32> {
        (1..=self.vocab.len() as u32)
            .map(|i| ops::dot(hidden, self.net.item_embedding(i)))
            .collect()
    }

    fn train_sequences(&self, sessions: &[Session]) -> Vec<TrainSeq> {
        let window = self.config.max_seq_len + 1;
        sessions
            .iter()
            .filter_map(|s| {
                let idx: Vec<u32> = s.clicks.iter().filter_map(|c| self.index_of(c.item)).collect();
                if idx.len() < 2 {
                    return None;
                }
                let w = &idx[idx.len().saturating_sub(window)..];
                let mut seen = w.to_vec();
                seen.sort_unstable();
                seen.dedup();
                Some(TrainSeq {
                    inputs: w[..w.len() - 1].to_vec(),
                    positives: w[1..].to_vec(),
                    seen,
                })
            })
            .collect()
    }

    fn sample_negatives(&self, seq: &TrainSeq, rng: &mut crate::rng::Rng) -> Vec<Option<u32>> {
        let n_items = self.vocab.len() as u32;
        let possible = (n_items as usize) > seq.seen.len();
        seq.positives
            .iter()
            .map(|_| {
                if !possible {
                    return None;
                }
                loop {
                    let cand = rng.random_range(1..=n_items);
                    if seq.seen.binary_search(&cand).is_err() {
                        return Some(cand);
                    }
                }
            })
            .collect()
    }

    /// Trains in place; keeps the parameters of the best validation epoch
    /// when `validation` yields events.
    pub fn train(&mut self, sessions: &[Session], validation: &[Session]) -> Result<TrainReport, SasrecError> {
        let seqs = self.train_sequences(sessions);
        if seqs.is_empty() {
            return Err(SasrecError::NoTrainableEvents);
        }
        let cfg = self.config.clone();
        let n_events: usize = seqs.iter().map(|s| s.positives.len()).sum();
        let mut report = TrainReport {
            n_events,
            ..TrainReport::default()
        };

        let mut init_rng = rng_from(derive(cfg.seed, &[2]));
        let mut init_loss = 0.0f64;
        for s in &seqs {
            let negs = self.sample_negatives(s, &mut init_rng);
            let trace = self.net.forward(&s.inputs, None);
            init_loss += self.net.bce(&trace, &s.positives, &negs, None) as f64;
        }
        report.initial_loss = init_loss / n_events as f64;

        let val_events = validation_events(validation, cfg.max_validation_events);
        let shapes: Vec<usize> = self.net.tensors.iter().map(|t| t.data.len()).collect();
        let mut adam = Adam::new(&shapes, cfg.learning_rate as f32, (cfg.adam_betas.0 as f32, cfg.adam_betas.1 as f32));
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        let mut best: Option<(f64, Network<f32>)> = None;
        let mut since_best = 0usize;
        let mut step = 0usize;

        for epoch in 0..cfg.n_epochs {
            order.shuffle(&mut rng_from(derive(cfg.seed, &[1, epoch as u64])));
            let mut epoch_loss = 0.0f64;
            for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let mut rng = rng_from(derive(cfg.seed, &[4, epoch as u64, b as u64]));
                let mut grads = self.net.zero_grads();
                let mut batch_events = 0usize;
                for &i in chunk {
                    let s = &seqs[i];
                    let negs = self.sample_negatives(s, &mut rng);
                    let trace = self.net.forward(
                        &s.inputs,
                        Some(Dropout {
                            rate: cfg.dropout_rate,
                            rng: &mut rng,
                        }),
                    );
                    epoch_loss += self.net.bce(&trace, &s.positives, &negs, Some(&mut grads)) as f64;
                    batch_events += s.positives.len();
                }
                let inv = 1.0 / batch_events as f32;
                for g in grads.iter_mut() {
                    g.iter_mut().for_each(|v| *v *= inv);
                }
                if cfg.l2_emb > 0.0 {
                    let c = 2.0 * cfg.l2_emb as f32;
                    for (g, &p) in grads[0].iter_mut().zip(&self.net.tensors[0].data) {
                        *g += c * p;
                    }
                }
                adam.update(self.net.tensors.iter_mut().map(|t| &mut t.data), &grads);
                step += 1;
                if !self.net.all_finite() {
                    return Err(SasrecError::NonFinite(step));
                }
            }
            report.epoch_losses.push(epoch_loss / n_events as f64);

            if val_events.is_empty() {
                report.best_epoch = epoch + 1;
                continue;
            }
            let hr = self.hit_rate(&val_events, 10);
            report.validation_hr10.push(hr);
            if best.as_ref().is_none_or(|(b, _)| hr > *b) {
                best = Some((hr, self.net.clone()));
                report.best_epoch = epoch + 1;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    break;
                }
            }
        }
        if let Some((_, net)) = best {
            self.net = net;
        }
        Ok(report)
    }

    /// HR@k over `(prefix, truth)` events, ranking the whole vocabulary minus
    /// prefix items. Out-of-vocabulary truths are misses.
    pub fn hit_rate(&self, events: &[(Vec<ItemId>, ItemId)], k: usize) -> f64 {
        if events.is_empty() {
            return 0.0;
        }
        let hits = events
            .iter()
            .filter(|(prefix, truth)| {
                let Some(t_idx) = self.index_of(*truth) else {
                    return false;
                };
                if prefix.contains(truth) {
                    return false;
                }
                let Some(h) = self.encode_prefix(prefix) else {
                    return false;
                };
                let scores = self.score_vocabulary(&h);
                let ts = scores[t_idx as usize - 1];
                let excluded: BTreeSet<u32> = prefix.iter().filter_map(|i| self.index_of(*i)).collect();
                let better = scores
                    .iter()
                    .enumerate()
                    .filter(|&(i, &s)| {
                        let idx = i as u32 + 1;
                        !excluded.contains(&idx) && (s > ts || (s == ts && idx < t_idx))
                    })
                    .count();
                better < k
            })
            .count();
        hits as f64 / events.len() as f64
    }
}

fn validation_events(sessions: &[Session], cap: usize) -> Vec<(Vec<ItemId>, ItemId)> {
    let mut out = Vec::new();
    'outer: for s in sessions {
        let items = s.items();
        for t in 1..items.len() {
            if out.len() >= cap {
                break 'outer;
            }
            out.push((items[..t].to_vec(), items[t]));
        }
    }
    out
}

impl Scorer for SasrecModel {
    fn score(&self, prefix: &[ItemId], candidates: &[ItemId]) -> Result<Vec<ItemScore>, ScoreError> {
        let h = self.encode_prefix(prefix).ok_or(ScoreError::EmptyPrefixAfterFiltering)?;
        Ok(candidates
            .iter()
            .map(|c| {
                self.index_of(*c)
                    .map(|i| ops::dot(&h, self.net.item_embedding(i)) as f64)
            })
            .collect())
    }

    fn contains(&self, item: ItemId) -> bool {
        self.lookup.contains_key(&item)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Click;

    fn small_config() -> SasrecConfig {
        SasrecConfig {
            max_seq_len: 8,
            embed_dim: 16,
            n_blocks: 1,
            n_heads: 2,
            dropout_rate: 0.1,
            n_epochs: 5,
            batch_size: 8,
            seed: 11,
            ..SasrecConfig::default()
        }
    }

    fn session(id: usize, items: &[u32]) -> Session {
        Session {
            id: format!("s{id}"),
            user_id: "u".into(),
            clicks: items
                .iter()
                .enumerate()
                .map(|(t, &i)| Click {
                    item: ItemId(i),
                    timestamp: t as i64,
                })
                .collect(),
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = SasrecModel::init(small_config(), (0..20).map(ItemId)).unwrap();
        let b = SasrecModel::init(small_config(), (0..20).map(ItemId)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn indivisible_heads_rejected() {
        let cfg = SasrecConfig {
            embed_dim: 7,
            n_heads: 2,
            ..SasrecConfig::default()
        };
        assert!(matches!(
            SasrecModel::init(cfg, [ItemId(0)]),
            Err(SasrecError::ConfigInvalid(_))
        ));
    }

    #[test]
    fn embedding_has_padding_row() {
        let m = SasrecModel::init(SasrecConfig::default(), (0..100).map(ItemId)).unwrap();
        assert_eq!(m.network().tensors[0].shape, vec![101, 64]);
        assert!(m.network().tensors[0].data[..64].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_shapes_and_padding() {
        let m = SasrecModel::init(small_config(), (0..20).map(ItemId)).unwrap();
        let one = m.forward(&[0, 0, 0, 0, 0, 0, 0, 3], false);
        let d = 16;
        assert!(one.has_prediction);
        assert!(one.values[..7 * d].iter().all(|&v| v == 0.0));
        assert!(one.values[7 * d..].iter().any(|&v| v != 0.0));
        let none = m.forward(&[0; 8], false);
        assert!(!none.has_prediction);
        assert!(none.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn scoring_marks_oov_and_is_repeatable() {
        let m = SasrecModel::init(small_config(), (0..20).map(ItemId)).unwrap();
        let a = m.score(&[ItemId(1), ItemId(2)], &[ItemId(3), ItemId(99)]).unwrap();
        assert!(a[0].unwrap().is_finite());
        assert_eq!(a[1], None);
        assert_eq!(a, m.score(&[ItemId(1), ItemId(2)], &[ItemId(3), ItemId(99)]).unwrap());
        assert_eq!(m.score(&[ItemId(77)], &[ItemId(3)]), Err(ScoreError::EmptyPrefixAfterFiltering));
    }

    #[test]
    fn no_trainable_events() {
        let mut m = SasrecModel::init(small_config(), (0..5).map(ItemId)).unwrap();
        assert!(matches!(
            m.train(&[session(0, &[1])], &[]),
            Err(SasrecError::NoTrainableEvents)
        ));
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let cfg = SasrecConfig {
            learning_rate: 0.0,
            n_epochs: 1,
            ..small_config()
        };
        let mut m = SasrecModel::init(cfg, (0..10).map(ItemId)).unwrap();
        let before = m.clone();
        m.train(&[session(0, &[1, 2, 3]), session(1, &[4, 5])], &[]).unwrap();
        assert_eq!(m.network(), before.network());
    }

    #[test]
    fn training_is_deterministic() {
        let sessions: Vec<Session> = (0..30).map(|i| session(i, &[i as u32 % 7, (i as u32 + 1) % 7, 8])).collect();
        let run = || {
            let mut m = SasrecModel::init(small_config(), (0..10).map(ItemId)).unwrap();
            let r = m.train(&sessions, &sessions[..5]).unwrap();
            (m, r)
        };
        let (a, ra) = run();
        let (b, rb) = run();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }

    #[test]
    fn learns_a_repeated_pair() {
        let mut sessions = Vec::new();
        for i in 0..40 {
            sessions.push(session(i, &[0, 1]));
            sessions.push(session(100 + i, &[2 + (i as u32 % 10), 2 + ((i as u32 + 3) % 10)]));
        }
        let cfg = SasrecConfig {
            n_epochs: 30,
            learning_rate: 5e-3,
            dropout_rate: 0.0,
            ..small_config()
        };
        let mut m = SasrecModel::init(cfg, (0..12).map(ItemId)).unwrap();
        let report = m.train(&sessions, &[]).unwrap();
        assert!(report.epoch_losses.last().unwrap() < &report.initial_loss);
        let candidates: Vec<ItemId> = (1..12).map(ItemId).collect();
        let scores = m.score(&[ItemId(0)], &candidates).unwrap();
        let best = scores
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.unwrap().total_cmp(&b.1.unwrap()))
            .unwrap()
            .0;
        assert_eq!(candidates[best], ItemId(1));
        assert!(m.all_finite());
    }
}
