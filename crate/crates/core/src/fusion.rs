//! Combining expert scores: mean-rank ensemble and a learned MLP fusion.

use std::collections::HashSet;
use std::io::{Read, Write};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Catalog, ItemId, Session};
use crate::optim::Adam;
use crate::rng::{derive, derive_named, rng_from};
use crate::sasrec::checkpoint::{get_bytes, get_tensor, get_u32, put_bytes, put_tensor, put_u32};
use crate::scoring::{cmp_ranked, rank_all, ItemScore};
use crate::segments::SubmodelRegistry;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("catalog has {eligible} eligible negatives, {requested} requested")]
    CatalogTooSmall { eligible: usize, requested: usize },
    #[error("invalid candidate request: {0}")]
    InvalidPosition(String),
    #[error("no usable fusion training events")]
    NoTrainableEvents,
    #[error("invalid fusion config: {0}")]
    ConfigInvalid(String),
    #[error("fusion checkpoint does not match the registry: {0}")]
    RegistryMismatch(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Read-only access to a set of aligned experts.
pub trait ExpertPanel {
    fn n_experts(&self) -> usize;

    /// Raw scores under expert `i`; `None` for out-of-vocabulary candidates
    /// and for every candidate when the expert cannot score the prefix.
    fn expert_scores(&self, i: usize, prefix: &[ItemId], candidates: &[ItemId]) -> Vec<ItemScore>;

    fn fingerprint(&self) -> String;
}

impl ExpertPanel for SubmodelRegistry {
    fn n_experts(&self) -> usize {
        self.len()
    }

    fn expert_scores(&self, i: usize, prefix: &[ItemId], candidates: &[ItemId]) -> Vec<ItemScore> {
        SubmodelRegistry::expert_scores(self, i, prefix, candidates)
    }

    fn fingerprint(&self) -> String {
        SubmodelRegistry::fingerprint(self).to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CandidateSet {
    pub session_id: String,
    pub prefix: Vec<ItemId>,
    pub true_next: ItemId,
    /// Ascending item order.
    pub negatives: Vec<ItemId>,
}

impl CandidateSet {
    /// The true next item followed by the negatives.
    pub fn items(&self) -> Vec<ItemId> {
        std::iter::once(self.true_next).chain(self.negatives.iter().copied()).collect()
    }
}

/// Prefix `clicks[..=position]`, truth `clicks[position + 1]` and `n_neg`
/// negatives drawn uniformly without replacement from the catalog minus the
/// prefix and the truth. Deterministic per `(seed, session id, position)`.
pub fn make_candidates(
    session: &Session,
    position: usize,
    catalog: &Catalog,
    n_neg: usize,
    seed: u64,
) -> Result<CandidateSet, FusionError> {
    if n_neg == 0 || position + 1 >= session.len() {
        return Err(FusionError::InvalidPosition(format!(
            "position {position} in a session of length {} with n_neg {n_neg}",
            session.len()
        )));
    }
    let prefix: Vec<ItemId> = session.clicks[..=position].iter().map(|c| c.item).collect();
    let true_next = session.clicks[position + 1].item;
    let mut excluded: HashSet<ItemId> = prefix.iter().copied().collect();
    excluded.insert(true_next);
    let eligible = catalog.len() - excluded.iter().filter(|i| i.index() < catalog.len()).count();
    if eligible < n_neg {
        return Err(FusionError::CatalogTooSmall {
            eligible,
            requested: n_neg,
        });
    }
    let mut rng = rng_from(derive(derive_named(seed, &session.id), &[position as u64]));
    let mut negatives: Vec<ItemId> = if eligible >= 4 * n_neg {
        let mut picked = HashSet::with_capacity(n_neg);
        let mut out = Vec::with_capacity(n_neg);
        while out.len() < n_neg {
            let cand = ItemId(rng.random_range(0..catalog.len() as u32));
            if !excluded.contains(&cand) && picked.insert(cand) {
                out.push(cand);
            }
        }
        out
    } else {
        let pool: Vec<ItemId> = catalog.item_ids().filter(|i| !excluded.contains(i)).collect();
        pool.choose_multiple(&mut rng, n_neg).copied().collect()
    };
    negatives.sort_unstable();
    Ok(CandidateSet {
        session_id: session.id.clone(),
        prefix,
        true_next,
        negatives,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreFeatureVector {
    pub values: Vec<f64>,
    pub oov_mask: Vec<bool>,
}

impl ScoreFeatureVector {
    fn write_input(&self, with_mask: bool, out: &mut Vec<f32>) {
        out.extend(self.values.iter().map(|v| *v as f32));
        if with_mask {
            out.extend(self.oov_mask.iter().map(|m| if *m { 1.0f32 } else { 0.0 }));
        }
    }
}

/// Z-scores the in-vocabulary entries with the population standard
/// deviation. Zero variance gives zeros; `None` entries become 0 and are
/// flagged in the returned mask.
pub fn standardize(raw: &[ItemScore]) -> (Vec<f64>, Vec<bool>) {
    let present: Vec<f64> = raw.iter().flatten().copied().collect();
    let mask: Vec<bool> = raw.iter().map(Option::is_none).collect();
    if present.is_empty() {
        return (vec![0.0; raw.len()], mask);
    }
    let n = present.len() as f64;
    let mean = present.iter().sum::<f64>() / n;
    let var = present.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    let values = raw
        .iter()
        .map(|v| match v {
            Some(v) if sd > 1e-12 * mean.abs().max(1.0) => (v - mean) / sd,
            _ => 0.0,
        })
        .collect();
    (values, mask)
}

/// One feature vector per candidate, standardized per expert across `candidates`.
pub fn feature_matrix<P: ExpertPanel + ?Sized>(panel: &P, prefix: &[ItemId], candidates: &[ItemId]) -> Vec<ScoreFeatureVector> {
    let n = panel.n_experts();
    let mut out: Vec<ScoreFeatureVector> = (0..candidates.len())
        .map(|_| ScoreFeatureVector {
            values: vec![0.0; n],
            oov_mask: vec![true; n],
        })
        .collect();
    for i in 0..n {
        let (values, mask) = standardize(&panel.expert_scores(i, prefix, candidates));
        for (c, (v, m)) in values.into_iter().zip(mask).enumerate() {
            out[c].values[i] = v;
            out[c].oov_mask[i] = m;
        }
    }
    out
}

/// Features of a single candidate scored on its own; by the zero-variance
/// rule every in-vocabulary entry is 0.
pub fn feature_vector<P: ExpertPanel + ?Sized>(panel: &P, prefix: &[ItemId], candidate: ItemId) -> ScoreFeatureVector {
    feature_matrix(panel, prefix, &[candidate]).pop().expect("one candidate")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub hidden: usize,
    pub n_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub n_neg: usize,
    /// Weight of positive examples in the loss; `None` means `n_neg`.
    pub positive_weight: Option<f64>,
    /// Appends the OOV mask to the input, doubling its width.
    pub mask_features: bool,
    /// Also builds examples from validation sessions.
    pub include_validation: bool,
    pub seed: u64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            hidden: 64,
            n_epochs: 10,
            batch_size: 256,
            learning_rate: 1e-3,
            n_neg: 50,
            positive_weight: None,
            mask_features: true,
            include_validation: true,
            seed: 0,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        if self.hidden == 0 || self.batch_size == 0 || self.n_neg == 0 {
            return Err(FusionError::ConfigInvalid("hidden, batch_size and n_neg must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || self.positive_weight.is_some_and(|w| !(w > 0.0)) {
            return Err(FusionError::ConfigInvalid("learning rate and positive weight must be valid".into()));
        }
        Ok(())
    }

    fn pos_weight(&self) -> f32 {
        self.positive_weight.unwrap_or(self.n_neg as f64) as f32
    }
}

/// Flat training examples: `inputs` is row-major `len × width`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExampleSet {
    pub width: usize,
    pub inputs: Vec<f32>,
    pub labels: Vec<bool>,
}

impl ExampleSet {
    pub fn new(width: usize) -> Self {
        ExampleSet {
            width,
            ..ExampleSet::default()
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn push(&mut self, input: &[f32], label: bool) {
        assert_eq!(input.len(), self.width);
        self.inputs.extend_from_slice(input);
        self.labels.push(label);
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.inputs[i * self.width..(i + 1) * self.width]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionReport {
    pub n_examples: usize,
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
}

/// `width → hidden (ReLU) → 1` network.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionModel {
    pub config: FusionConfig,
    pub n_experts: usize,
    /// Fingerprint of the panel the model was trained against.
    pub panel_fingerprint: String,
    /// `[w1 (hidden × width), b1 (hidden), w2 (hidden), b2 (1)]`.
    params: Vec<Vec<f32>>,
}

impl FusionModel {
    pub fn init(config: FusionConfig, n_experts: usize, panel_fingerprint: String) -> Result<Self, FusionError> {
        config.validate()?;
        let width = if config.mask_features { 2 * n_experts } else { n_experts };
        let h = config.hidden;
        let mut rng = rng_from(derive(config.seed, &[0]));
        let a1 = 1.0 / (width.max(1) as f32).sqrt();
        let a2 = 1.0 / (h as f32).sqrt();
        let w1 = (0..h * width).map(|_| rng.random_range(-a1..a1)).collect();
        let w2 = (0..h).map(|_| rng.random_range(-a2..a2)).collect();
        Ok(FusionModel {
            config,
            n_experts,
            panel_fingerprint,
            params: vec![w1, vec![0.0; h], w2, vec![0.0]],
        })
    }

    /// Builds a model from explicit weights, e.g. for hand-set networks.
    pub fn from_weights(
        config: FusionConfig,
        n_experts: usize,
        panel_fingerprint: String,
        w1: Vec<f32>,
        b1: Vec<f32>,
        w2: Vec<f32>,
        b2: f32,
    ) -> Result<Self, FusionError> {
        let mut m = FusionModel::init(config, n_experts, panel_fingerprint)?;
        let shapes = m.params.iter().map(Vec::len).collect::<Vec<_>>();
        if [w1.len(), b1.len(), w2.len(), 1] != shapes[..] {
            return Err(FusionError::ConfigInvalid(format!("weight shapes do not match {shapes:?}")));
        }
        m.params = vec![w1, b1, w2, vec![b2]];
        Ok(m)
    }

    pub fn input_width(&self) -> usize {
        if self.config.mask_features {
            2 * self.n_experts
        } else {
            self.n_experts
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().flatten().all(|v| v.is_finite())
    }

    /// The fused logit for one input row.
    pub fn logit(&self, x: &[f32]) -> f32 {
        let w = self.input_width();
        let mut z = self.params[3][0];
        for (j, (row, b)) in self.params[0].chunks_exact(w).zip(&self.params[1]).enumerate() {
            let pre = b + row.iter().zip(x).map(|(a, b)| a * b).sum::<f32>();
            if pre > 0.0 {
                z += self.params[2][j] * pre;
            }
        }
        z
    }

    pub fn input_of(&self, f: &ScoreFeatureVector) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.input_width());
        f.write_input(self.config.mask_features, &mut out);
        out
    }

    /// Trains on prepared examples; returns per-epoch mean weighted loss.
    pub fn fit(&mut self, examples: &ExampleSet) -> Result<FusionReport, FusionError> {
        if examples.is_empty() {
            return Err(FusionError::NoTrainableEvents);
        }
        assert_eq!(examples.width, self.input_width());
        let cfg = self.config.clone();
        let (w, h) = (self.input_width(), cfg.hidden);
        let pos_w = cfg.pos_weight();
        let shapes: Vec<usize> = self.params.iter().map(Vec::len).collect();
        let mut adam = Adam::new(&shapes, cfg.learning_rate as f32, (0.9, 0.999));
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let mut epoch_losses = Vec::with_capacity(cfg.n_epochs);
        let mut pre = vec![0.0f32; h];
        for epoch in 0..cfg.n_epochs {
            order.shuffle(&mut rng_from(derive(cfg.seed, &[1, epoch as u64])));
            let mut total = 0.0f64;
            for batch in order.chunks(cfg.batch_size) {
                let mut grads: Vec<Vec<f32>> = shapes.iter().map(|&n| vec![0.0; n]).collect();
                let scale = 1.0 / batch.len() as f32;
                for &i in batch {
                    let x = examples.row(i);
                    let y = examples.labels[i];
                    let mut z = self.params[3][0];
                    for j in 0..h {
                        let row = &self.params[0][j * w..(j + 1) * w];
                        pre[j] = self.params[1][j] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f32>();
                        if pre[j] > 0.0 {
                            z += self.params[2][j] * pre[j];
                        }
                    }
                    let (weight, target) = if y { (pos_w, 1.0) } else { (1.0, 0.0) };
                    let signed = if y { -z } else { z };
                    total += (weight * softplus(signed)) as f64;
                    let dz = weight * (sigmoid(z) - target) * scale;
                    grads[3][0] += dz;
                    for j in 0..h {
                        if pre[j] > 0.0 {
                            grads[2][j] += dz * pre[j];
                            let dh = dz * self.params[2][j];
                            grads[1][j] += dh;
                            for (g, xv) in grads[0][j * w..(j + 1) * w].iter_mut().zip(x) {
                                *g += dh * xv;
                            }
                        }
                    }
                }
                adam.update(self.params.iter_mut(), &grads);
            }
            epoch_losses.push(total / examples.len() as f64);
        }
        let correct = (0..examples.len())
            .filter(|&i| (self.logit(examples.row(i)) > 0.0) == examples.labels[i])
            .count();
        Ok(FusionReport {
            n_examples: examples.len(),
            epoch_losses,
            train_accuracy: correct as f64 / examples.len() as f64,
        })
    }

    pub fn save<W: Write>(&self, mut w: W) -> Result<(), FusionError> {
        w.write_all(MAGIC)?;
        put_u32(&mut w, VERSION)?;
        let cfg = serde_json::to_vec(&self.config).map_err(|e| FusionError::Checkpoint(e.to_string()))?;
        put_bytes(&mut w, &cfg)?;
        put_u32(&mut w, self.n_experts as u32)?;
        put_bytes(&mut w, self.panel_fingerprint.as_bytes())?;
        let (wd, h) = (self.input_width(), self.config.hidden);
        put_tensor(&mut w, "w1", &[h, wd], &self.params[0])?;
        put_tensor(&mut w, "b1", &[h], &self.params[1])?;
        put_tensor(&mut w, "w2", &[h], &self.params[2])?;
        put_tensor(&mut w, "b2", &[1], &self.params[3])?;
        w.flush()?;
        Ok(())
    }

    /// Loads a checkpoint and checks it against `panel`'s width and fingerprint.
    pub fn load<R: Read, P: ExpertPanel + ?Sized>(mut r: R, panel: &P) -> Result<Self, FusionError> {
        let bad = |m: String| FusionError::Checkpoint(m);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("not a fusion checkpoint".into()));
        }
        let version = get_u32(&mut r)?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let config: FusionConfig = serde_json::from_slice(&get_bytes(&mut r)?).map_err(|e| bad(e.to_string()))?;
        let n_experts = get_u32(&mut r)? as usize;
        let fingerprint = String::from_utf8(get_bytes(&mut r)?).map_err(|e| bad(e.to_string()))?;
        if n_experts != panel.n_experts() {
            return Err(FusionError::RegistryMismatch(format!(
                "checkpoint expects {n_experts} experts, registry has {}",
                panel.n_experts()
            )));
        }
        if fingerprint != panel.fingerprint() {
            return Err(FusionError::RegistryMismatch("registry fingerprint differs".into()));
        }
        let mut params = Vec::with_capacity(4);
        for expected in ["w1", "b1", "w2", "b2"] {
            let (name, _, data) = get_tensor(&mut r)?;
            if name != expected {
                return Err(bad(format!("expected tensor {expected}, found {name}")));
            }
            params.push(data);
        }
        let mut m = FusionModel::init(config, n_experts, fingerprint)?;
        let shapes: Vec<usize> = m.params.iter().map(Vec::len).collect();
        if params.iter().map(Vec::len).ne(shapes.iter().copied()) {
            return Err(bad("tensor shapes do not match the config".into()));
        }
        m.params = params;
        Ok(m)
    }
}

const MAGIC: &[u8; 4] = b"FUSN";
const VERSION: u32 = 1;

fn sigmoid(z: f32) -> f32 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f32) -> f32 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Fusion examples over every prediction position of `sessions`: the true
/// next item is labelled 1 and `n_neg` sampled negatives 0.
pub fn build_examples<P: ExpertPanel + ?Sized>(
    panel: &P,
    sessions: &[Session],
    catalog: &Catalog,
    config: &FusionConfig,
) -> Result<ExampleSet, FusionError> {
    let width = if config.mask_features {
        2 * panel.n_experts()
    } else {
        panel.n_experts()
    };
    let mut set = ExampleSet::new(width);
    let mut row = Vec::with_capacity(width);
    for s in sessions {
        for pos in 0..s.len().saturating_sub(1) {
            let cands = match make_candidates(s, pos, catalog, config.n_neg, config.seed) {
                Ok(c) => c,
                Err(FusionError::CatalogTooSmall { .. }) => continue,
                Err(e) => return Err(e),
            };
            let items = cands.items();
            for (k, f) in feature_matrix(panel, &cands.prefix, &items).iter().enumerate() {
                row.clear();
                f.write_input(config.mask_features, &mut row);
                set.push(&row, k == 0);
            }
        }
    }
    Ok(set)
}

/// Builds examples from `train` (plus `validation` when configured) and fits
/// a fresh model.
pub fn train_fusion<P: ExpertPanel + ?Sized>(
    panel: &P,
    train: &[Session],
    validation: &[Session],
    catalog: &Catalog,
    config: &FusionConfig,
) -> Result<(FusionModel, FusionReport), FusionError> {
    config.validate()?;
    let mut examples = build_examples(panel, train, catalog, config)?;
    if config.include_validation {
        let extra = build_examples(panel, validation, catalog, config)?;
        examples.inputs.extend(extra.inputs);
        examples.labels.extend(extra.labels);
    }
    if !examples.labels.iter().any(|y| *y) {
        return Err(FusionError::NoTrainableEvents);
    }
    let mut model = FusionModel::init(config.clone(), panel.n_experts(), panel.fingerprint())?;
    let report = model.fit(&examples)?;
    Ok((model, report))
}

/// Candidates ranked by fused logit, ties by ascending item id.
pub fn fuse_score<P: ExpertPanel + ?Sized>(
    model: &FusionModel,
    panel: &P,
    prefix: &[ItemId],
    candidates: &[ItemId],
) -> Vec<(ItemId, f64)> {
    let feats = feature_matrix(panel, prefix, candidates);
    let mut row = Vec::with_capacity(model.input_width());
    let mut scored: Vec<(ItemId, f64)> = candidates
        .iter()
        .zip(&feats)
        .map(|(c, f)| {
            row.clear();
            f.write_input(model.config.mask_features, &mut row);
            (*c, model.logit(&row) as f64)
        })
        .collect();
    scored.sort_by(|a, b| cmp_ranked(*a, *b));
    scored
}

/// Twice the fractional rank of each candidate under one expert's raw
/// scores: tied candidates share the mean of their positions, and
/// out-of-vocabulary candidates get rank `|candidates| + 1`.
pub fn doubled_ranks(raw: &[ItemScore]) -> Vec<u64> {
    let n = raw.len() as u64;
    raw.iter()
        .map(|s| match s {
            None => 2 * (n + 1),
            Some(v) => {
                let better = raw.iter().flatten().filter(|o| **o > *v).count() as u64;
                let tied = raw.iter().flatten().filter(|o| **o == *v).count() as u64;
                2 * (better + 1) + (tied - 1)
            }
        })
        .collect()
}

/// Candidates in ascending mean rank across experts, ties by ascending item id.
/// Returns `(item, mean rank)`.
pub fn mean_rank_fuse<P: ExpertPanel + ?Sized>(panel: &P, prefix: &[ItemId], candidates: &[ItemId]) -> Vec<(ItemId, f64)> {
    let n = panel.n_experts().max(1);
    let mut sums = vec![0u64; candidates.len()];
    for i in 0..panel.n_experts() {
        for (s, r) in sums.iter_mut().zip(doubled_ranks(&panel.expert_scores(i, prefix, candidates))) {
            *s += r;
        }
    }
    let mut order: Vec<(ItemId, u64)> = candidates.iter().copied().zip(sums).collect();
    order.sort_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(&b.0)));
    order
        .into_iter()
        .map(|(c, s)| (c, s as f64 / (2 * n) as f64))
        .collect()
}

/// Ranks by negated mean rank so the result composes with [`rank_all`].
pub fn mean_rank_order<P: ExpertPanel + ?Sized>(panel: &P, prefix: &[ItemId], candidates: &[ItemId]) -> Vec<ItemId> {
    rank_all(
        mean_rank_fuse(panel, prefix, candidates)
            .into_iter()
            .map(|(c, r)| (c, -r))
            .collect(),
    )
}
