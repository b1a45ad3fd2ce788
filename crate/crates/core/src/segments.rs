//! Category × locality segmentation and the registry of expert submodels.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{Article, Catalog, ItemId, Locality, Session, SplitBundle};
use crate::rng::derive;
use crate::sasrec::{SasrecConfig, SasrecError, SasrecModel};
use crate::scoring::{ItemScore, ScoreError, Scorer};
use crate::sknn::{SknnConfig, SknnError, SknnModel};

#[derive(Debug, Error)]
pub enum SegmentsError {
    #[error("training split is empty")]
    EmptyTrainSplit,
    #[error("registry manifest error: {0}")]
    Manifest(String),
    #[error(transparent)]
    Sasrec(#[from] SasrecError),
    #[error(transparent)]
    Sknn(#[from] SknnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CategoryFilter {
    All,
    Only(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LocalityFilter {
    All,
    Local,
    NonLocal,
}

impl LocalityFilter {
    fn suffix(self) -> &'static str {
        match self {
            LocalityFilter::All => "all",
            LocalityFilter::Local => "local",
            LocalityFilter::NonLocal => "non-local",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SegmentSpec {
    pub name: String,
    pub category: CategoryFilter,
    pub locality: LocalityFilter,
}

impl SegmentSpec {
    pub fn new(category: CategoryFilter, locality: LocalityFilter) -> Self {
        let cat = match &category {
            CategoryFilter::All => "all",
            CategoryFilter::Only(c) => c.as_str(),
        };
        SegmentSpec {
            name: format!("{cat}_{}", locality.suffix()),
            category,
            locality,
        }
    }

    /// The unfiltered segment, `all_all`.
    pub fn global() -> Self {
        SegmentSpec::new(CategoryFilter::All, LocalityFilter::All)
    }

    /// Articles of unknown locality only match a locality filter of `All`.
    pub fn matches(&self, article: &Article) -> bool {
        let cat_ok = match &self.category {
            CategoryFilter::All => true,
            CategoryFilter::Only(c) => *c == article.category,
        };
        let loc_ok = match self.locality {
            LocalityFilter::All => true,
            LocalityFilter::Local => article.locality == Locality::Local,
            LocalityFilter::NonLocal => article.locality == Locality::NonLocal,
        };
        cat_ok && loc_ok
    }
}

impl fmt::Display for SegmentSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeStyle {
    /// Every category under all, local and non-local filters.
    PerCategoryFull,
    /// [`SchemeStyle::PerCategoryFull`] followed by `all_local` and `all_non-local`.
    PerCategoryPlusPooled,
}

/// Ordered segments; position `i` is feature `i` of the fusion input.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentationScheme {
    pub segments: Vec<SegmentSpec>,
}

impl SegmentationScheme {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.segments.iter().map(|s| s.name.as_str()).collect()
    }

    /// Appends the unfiltered segment if absent.
    pub fn with_global(mut self) -> Self {
        let g = SegmentSpec::global();
        if !self.segments.contains(&g) {
            self.segments.push(g);
        }
        self
    }
}

/// Groups segments by locality filter: every `<cat>_all`, then every
/// `<cat>_local`, then every `<cat>_non-local`, categories in taxonomy order.
pub fn build_scheme(catalog: &Catalog, style: SchemeStyle) -> SegmentationScheme {
    let mut segments = Vec::new();
    for loc in [LocalityFilter::All, LocalityFilter::Local, LocalityFilter::NonLocal] {
        for cat in catalog.taxonomy() {
            segments.push(SegmentSpec::new(CategoryFilter::Only(cat.clone()), loc));
        }
    }
    if style == SchemeStyle::PerCategoryPlusPooled {
        segments.push(SegmentSpec::new(CategoryFilter::All, LocalityFilter::Local));
        segments.push(SegmentSpec::new(CategoryFilter::All, LocalityFilter::NonLocal));
    }
    SegmentationScheme { segments }
}

/// Keeps matching clicks in order and drops sessions left with fewer than two.
pub fn filter_interactions(sessions: &[Session], segment: &SegmentSpec, catalog: &Catalog) -> Vec<Session> {
    sessions
        .iter()
        .filter_map(|s| {
            let clicks: Vec<_> = s
                .clicks
                .iter()
                .filter(|c| segment.matches(catalog.article(c.item)))
                .copied()
                .collect();
            (clicks.len() >= 2).then(|| Session {
                id: s.id.clone(),
                user_id: s.user_id.clone(),
                clicks,
            })
        })
        .collect()
}

/// Prefix items matching `segment`, in order.
pub fn filter_prefix(prefix: &[ItemId], segment: &SegmentSpec, catalog: &Catalog) -> Vec<ItemId> {
    prefix
        .iter()
        .copied()
        .filter(|i| segment.matches(catalog.article(*i)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseKind {
    Sasrec,
    Sknn,
}

impl BaseKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BaseKind::Sasrec => "sasrec",
            BaseKind::Sknn => "sknn",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum BaseConfig {
    Sasrec(SasrecConfig),
    Sknn(SknnConfig),
}

impl BaseConfig {
    pub fn kind(&self) -> BaseKind {
        match self {
            BaseConfig::Sasrec(_) => BaseKind::Sasrec,
            BaseConfig::Sknn(_) => BaseKind::Sknn,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Submodel {
    Sasrec(SasrecModel),
    Sknn(SknnModel),
}

impl Submodel {
    pub fn kind(&self) -> BaseKind {
        match self {
            Submodel::Sasrec(_) => BaseKind::Sasrec,
            Submodel::Sknn(_) => BaseKind::Sknn,
        }
    }

    /// Trains one model. SASRec uses `validation` for early stopping.
    pub fn train(train: &[Session], validation: &[Session], base: &BaseConfig) -> Result<Submodel, SegmentsError> {
        match base {
            BaseConfig::Sknn(cfg) => Ok(Submodel::Sknn(SknnModel::fit(train, *cfg)?)),
            BaseConfig::Sasrec(cfg) => {
                let vocab: BTreeSet<ItemId> = train.iter().flat_map(|s| s.clicks.iter().map(|c| c.item)).collect();
                let mut model = SasrecModel::init(cfg.clone(), vocab)?;
                model.train(train, validation)?;
                Ok(Submodel::Sasrec(model))
            }
        }
    }

    /// SHA-256 of the serialized model.
    pub fn digest(&self, catalog: &Catalog) -> Result<[u8; 32], SegmentsError> {
        let mut buf = Vec::new();
        match self {
            Submodel::Sasrec(m) => m.save(&mut buf, catalog)?,
            Submodel::Sknn(m) => {
                buf.extend_from_slice(m.params_toml()?.as_bytes());
                m.write_sessions(&mut buf, catalog)?;
            }
        }
        Ok(Sha256::digest(&buf).into())
    }

    /// Writes a checkpoint file (SASRec) or directory (SKNN) at `path`.
    pub fn save(&self, path: &Path, catalog: &Catalog) -> Result<(), SegmentsError> {
        match self {
            Submodel::Sasrec(m) => m.save(std::io::BufWriter::new(fs::File::create(path)?), catalog)?,
            Submodel::Sknn(m) => m.save(path, catalog)?,
        }
        Ok(())
    }

    pub fn load(path: &Path, kind: BaseKind, catalog: &Catalog) -> Result<Submodel, SegmentsError> {
        Ok(match kind {
            BaseKind::Sasrec => Submodel::Sasrec(SasrecModel::load(std::io::BufReader::new(fs::File::open(path)?), catalog)?),
            BaseKind::Sknn => Submodel::Sknn(SknnModel::load(path, catalog)?),
        })
    }
}

impl Scorer for Submodel {
    fn score(&self, prefix: &[ItemId], candidates: &[ItemId]) -> Result<Vec<ItemScore>, ScoreError> {
        match self {
            Submodel::Sasrec(m) => m.score(prefix, candidates),
            Submodel::Sknn(m) => Scorer::score(m, prefix, candidates),
        }
    }

    fn contains(&self, item: ItemId) -> bool {
        match self {
            Submodel::Sasrec(m) => m.contains(item),
            Submodel::Sknn(m) => Scorer::contains(m, item),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RegistryEntry {
    pub spec: SegmentSpec,
    pub n_train_sessions: usize,
    pub sparse: bool,
    pub model: Option<Submodel>,
    /// Training error, when the model could not be built.
    pub failure: Option<String>,
}

/// Trained experts aligned with a scheme. Holds the catalog so that
/// prefixes can be filtered per segment at scoring time.
#[derive(Clone, Debug)]
pub struct SubmodelRegistry {
    pub scheme: SegmentationScheme,
    pub base: BaseKind,
    pub entries: Vec<RegistryEntry>,
    catalog: Catalog,
    fingerprint: String,
}

/// Segments with fewer filtered training sessions than this are flagged sparse.
pub const DEFAULT_SPARSE_FLOOR: usize = 50;

/// Trains one expert per segment on that segment's filtered train sessions
/// (validation filtered the same way). Per-segment failures are recorded
/// and do not abort the others. SASRec seeds are derived per segment index.
pub fn train_registry(
    split: &SplitBundle,
    scheme: &SegmentationScheme,
    catalog: &Catalog,
    base: &BaseConfig,
    sparse_floor: usize,
) -> Result<SubmodelRegistry, SegmentsError> {
    if split.train.is_empty() {
        return Err(SegmentsError::EmptyTrainSplit);
    }
    let entries = scheme
        .segments
        .iter()
        .enumerate()
        .map(|(i, spec)| train_segment(split, spec, i, catalog, base, sparse_floor))
        .collect();
    SubmodelRegistry::assemble(scheme.clone(), base.kind(), entries, catalog.clone())
}

/// Trains the expert at position `index` of a scheme, exactly as
/// [`train_registry`] does.
pub fn train_segment(
    split: &SplitBundle,
    spec: &SegmentSpec,
    index: usize,
    catalog: &Catalog,
    base: &BaseConfig,
    sparse_floor: usize,
) -> RegistryEntry {
    let train = filter_interactions(&split.train, spec, catalog);
    let validation = filter_interactions(&split.validation, spec, catalog);
    let cfg = match base {
        BaseConfig::Sasrec(c) => BaseConfig::Sasrec(SasrecConfig {
            seed: derive(c.seed, &[index as u64]),
            ..c.clone()
        }),
        other => other.clone(),
    };
    let (model, failure) = match Submodel::train(&train, &validation, &cfg) {
        Ok(m) => (Some(m), None),
        Err(e) => (None, Some(e.to_string())),
    };
    RegistryEntry {
        spec: spec.clone(),
        n_train_sessions: train.len(),
        sparse: train.len() < sparse_floor,
        model,
        failure,
    }
}

/// File name of the checkpoint for expert `index`.
pub fn checkpoint_name(index: usize, kind: BaseKind) -> String {
    format!("{index:02}.{}", kind.as_str())
}

const MANIFEST: &str = "manifest.csv";

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    segment: String,
    base: BaseKind,
    checkpoint: String,
    sparse: bool,
    n_train_sessions: usize,
    failure: String,
}

impl SubmodelRegistry {
    pub fn assemble(
        scheme: SegmentationScheme,
        base: BaseKind,
        entries: Vec<RegistryEntry>,
        catalog: Catalog,
    ) -> Result<Self, SegmentsError> {
        if entries.len() != scheme.len() || entries.iter().zip(&scheme.segments).any(|(e, s)| e.spec != *s) {
            return Err(SegmentsError::Manifest("entries are not aligned with the scheme".into()));
        }
        let mut h = Sha256::new();
        h.update(base.as_str());
        for e in &entries {
            h.update([0u8]);
            h.update(e.spec.name.as_bytes());
            h.update([e.sparse as u8]);
            match &e.model {
                Some(m) => h.update(m.digest(&catalog)?),
                None => h.update(b"none"),
            }
        }
        let fingerprint = hex::encode(h.finalize());
        Ok(SubmodelRegistry {
            scheme,
            base,
            entries,
            catalog,
            fingerprint,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    /// SHA-256 over base kind, segment names, sparse flags and model bytes.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Scores under expert `i` with the prefix filtered to its segment.
    /// A missing model or an empty filtered prefix yields all `None`.
    pub fn expert_scores(&self, i: usize, prefix: &[ItemId], candidates: &[ItemId]) -> Vec<ItemScore> {
        let e = &self.entries[i];
        let Some(model) = &e.model else {
            return vec![None; candidates.len()];
        };
        let filtered = filter_prefix(prefix, &e.spec, &self.catalog);
        model
            .score(&filtered, candidates)
            .unwrap_or_else(|_| vec![None; candidates.len()])
    }

    /// Writes `manifest.csv` plus one checkpoint per trained segment.
    pub fn save(&self, dir: &Path) -> Result<(), SegmentsError> {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join(MANIFEST))?;
        for (i, e) in self.entries.iter().enumerate() {
            let checkpoint = match &e.model {
                Some(m) => {
                    let name = checkpoint_name(i, m.kind());
                    m.save(&dir.join(&name), &self.catalog)?;
                    name
                }
                None => String::new(),
            };
            w.serialize(ManifestRow {
                segment: e.spec.name.clone(),
                base: self.base,
                checkpoint,
                sparse: e.sparse,
                n_train_sessions: e.n_train_sessions,
                failure: e.failure.clone().unwrap_or_default(),
            })?;
        }
        w.flush()?;
        fs::write(dir.join("scheme.json"), serde_json::to_vec_pretty(&self.scheme).expect("scheme serializes"))?;
        Ok(())
    }

    pub fn load(dir: &Path, catalog: &Catalog) -> Result<Self, SegmentsError> {
        let scheme_bytes = fs::read(dir.join("scheme.json"))?;
        let scheme: SegmentationScheme =
            serde_json::from_slice(&scheme_bytes).map_err(|e| SegmentsError::Manifest(e.to_string()))?;
        let mut rdr = csv::Reader::from_path(dir.join(MANIFEST))?;
        let mut entries = Vec::new();
        let mut base = None;
        for (row, spec) in rdr.deserialize::<ManifestRow>().zip(&scheme.segments) {
            let row = row?;
            if row.segment != spec.name {
                return Err(SegmentsError::Manifest(format!(
                    "manifest segment `{}` does not match scheme segment `{}`",
                    row.segment, spec.name
                )));
            }
            base = Some(row.base);
            let model = if row.checkpoint.is_empty() {
                None
            } else {
                Some(Submodel::load(&dir.join(&row.checkpoint), row.base, catalog)?)
            };
            entries.push(RegistryEntry {
                spec: spec.clone(),
                n_train_sessions: row.n_train_sessions,
                sparse: row.sparse,
                model,
                failure: (!row.failure.is_empty()).then_some(row.failure),
            });
        }
        let base = base.ok_or_else(|| SegmentsError::Manifest("empty manifest".into()))?;
        SubmodelRegistry::assemble(scheme, base, entries, catalog.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{chronological_split, Click, SplitRatios};

    fn catalog() -> Catalog {
        let mut arts = Vec::new();
        for (i, (cat, loc)) in [
            ("Sports", Locality::Local),
            ("News", Locality::NonLocal),
            ("Sports", Locality::NonLocal),
            ("News", Locality::Local),
            ("Life and Culture", Locality::Unknown),
            ("Life and Culture", Locality::Local),
        ]
        .iter()
        .enumerate()
        {
            arts.push(Article {
                id: format!("a{i}"),
                category: cat.to_string(),
                locality: *loc,
            });
        }
        Catalog::from_articles(arts).unwrap()
    }

    fn session(id: usize, items: &[u32]) -> Session {
        Session {
            id: format!("s{id:03}"),
            user_id: "u".into(),
            clicks: items
                .iter()
                .enumerate()
                .map(|(t, &i)| Click {
                    item: ItemId(i),
                    timestamp: (id * 100 + t) as i64,
                })
                .collect(),
        }
    }

    #[test]
    fn scheme_sizes_and_names() {
        let three = Catalog::new(
            ["News", "Sports", "Life and Culture"],
            vec![Article {
                id: "x".into(),
                category: "News".into(),
                locality: Locality::Local,
            }],
        )
        .unwrap();
        let full = build_scheme(&three, SchemeStyle::PerCategoryFull);
        assert_eq!(full.len(), 9);
        let pooled = build_scheme(&three, SchemeStyle::PerCategoryPlusPooled);
        assert_eq!(pooled.len(), 11);
        assert!(pooled.names().contains(&"Sports_local"));
        assert_eq!(&pooled.names()[9..], &["all_local", "all_non-local"]);
        let unique: BTreeSet<_> = pooled.names().into_iter().collect();
        assert_eq!(unique.len(), 11);

        let one = Catalog::new(["News"], vec![]).unwrap();
        assert_eq!(build_scheme(&one, SchemeStyle::PerCategoryFull).len(), 3);
        assert_eq!(pooled.clone().with_global().len(), 12);
        assert_eq!(pooled.with_global().with_global().len(), 12);
    }

    #[test]
    fn filter_matches_hand_trace() {
        let cat = catalog();
        // [local Sports, non-local News, local Sports]
        let s = vec![session(0, &[0, 1, 0])];
        let spec = SegmentSpec::new(CategoryFilter::Only("Sports".into()), LocalityFilter::Local);
        let out = filter_interactions(&s, &spec, &cat);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].items(), vec![ItemId(0), ItemId(0)]);
        assert_eq!(filter_interactions(&s, &SegmentSpec::global(), &cat), s);
        let culture = SegmentSpec::new(CategoryFilter::Only("Life and Culture".into()), LocalityFilter::All);
        assert!(filter_interactions(&s, &culture, &cat).is_empty());
    }

    #[test]
    fn unknown_locality_only_matches_all() {
        let cat = catalog();
        let a = cat.article(ItemId(4));
        assert!(SegmentSpec::global().matches(a));
        assert!(!SegmentSpec::new(CategoryFilter::All, LocalityFilter::Local).matches(a));
        assert!(!SegmentSpec::new(CategoryFilter::All, LocalityFilter::NonLocal).matches(a));
    }

    fn split() -> SplitBundle {
        let sessions: Vec<Session> = (0..40)
            .map(|i| match i % 3 {
                0 => session(i, &[0, 2, 0, 2]),
                1 => session(i, &[1, 3, 1]),
                _ => session(i, &[5, 3, 4, 5]),
            })
            .collect();
        chronological_split(&sessions, SplitRatios::default()).unwrap()
    }

    #[test]
    fn registry_trains_flags_and_round_trips() {
        let cat = catalog();
        let scheme = build_scheme(&cat, SchemeStyle::PerCategoryPlusPooled);
        let reg = train_registry(&split(), &scheme, &cat, &BaseConfig::Sknn(SknnConfig::default()), 10).unwrap();
        assert_eq!(reg.len(), scheme.len());
        for (e, s) in reg.entries.iter().zip(&scheme.segments) {
            assert_eq!(e.spec, *s);
            if let Some(m) = &e.model {
                for item in cat.item_ids().filter(|i| m.contains(*i)) {
                    assert!(s.matches(cat.article(item)), "{} holds {item:?}", s.name);
                }
            }
        }
        // Life and Culture local has the single item 5 and sessions [5, 5].
        let lc_local = reg.entries.iter().find(|e| e.spec.name == "Life and Culture_local").unwrap();
        assert!(lc_local.model.is_some());
        // No session has two Life and Culture non-local clicks.
        let lc_nl = reg.entries.iter().find(|e| e.spec.name == "Life and Culture_non-local").unwrap();
        assert!(lc_nl.sparse && lc_nl.model.is_none() && lc_nl.failure.is_some());
        let idx = reg.entries.iter().position(|e| e.model.is_none()).unwrap();
        assert!(reg.expert_scores(idx, &[ItemId(0)], &[ItemId(1), ItemId(2)]).iter().all(Option::is_none));

        let dir = tempfile::tempdir().unwrap();
        reg.save(dir.path()).unwrap();
        let back = SubmodelRegistry::load(dir.path(), &cat).unwrap();
        assert_eq!(back.fingerprint(), reg.fingerprint());
        assert_eq!(back.scheme, reg.scheme);
        for i in 0..reg.len() {
            assert_eq!(
                back.expert_scores(i, &[ItemId(0), ItemId(1)], &[ItemId(2), ItemId(3)]),
                reg.expert_scores(i, &[ItemId(0), ItemId(1)], &[ItemId(2), ItemId(3)])
            );
        }
    }

    #[test]
    fn sasrec_registry_is_seed_stable() {
        let cat = catalog();
        let scheme = build_scheme(&cat, SchemeStyle::PerCategoryFull);
        let base = BaseConfig::Sasrec(SasrecConfig {
            max_seq_len: 4,
            embed_dim: 8,
            n_blocks: 1,
            n_epochs: 2,
            batch_size: 4,
            ..SasrecConfig::default()
        });
        let a = train_registry(&split(), &scheme, &cat, &base, 50).unwrap();
        let b = train_registry(&split(), &scheme, &cat, &base, 50).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert!(a.entries.iter().all(|e| e.sparse));
    }
}
