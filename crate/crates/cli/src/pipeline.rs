use std::collections::BTreeSet;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use hybridrec_core::corpus::{
    chronological_split, parse_articles, parse_interactions, sessionize, write_articles, write_interactions,
    ArticleFormat, Catalog, Locality, SplitBundle,
};
use hybridrec_core::eval::{
    compare_report, enumerate_events, evaluate, write_reports_csv, FusionRecommender, MeanRankRecommender,
    MetricsReport, ScorerRecommender,
};
use hybridrec_core::fusion::{train_fusion, FusionConfig, FusionModel};
use hybridrec_core::rng::derive_named;
use hybridrec_core::sasrec::SasrecConfig;
use hybridrec_core::segments::{
    build_scheme, checkpoint_name, filter_interactions, train_segment, BaseConfig, BaseKind, RegistryEntry,
    SegmentSpec, Submodel, SubmodelRegistry,
};
use hybridrec_core::syngen::{generate, validate_proportions, GeneratorConfig};
use hybridrec_core::ItemId;
use hybridrec_labeler::{read_article_texts, Labeler, LabelFailure};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{DatasetSource, ExperimentConfig, ReportLayout};
use crate::manifest::{hash_path, sha256_hex, write_atomic, RunManifest, StageRecord};
use crate::CliError;

pub const ARTICLES: &str = "data/articles.csv";
pub const LABELED_ARTICLES: &str = "data/articles_labeled.csv";
pub const INTERACTIONS: &str = "data/interactions.csv";
pub const LABEL_PROGRESS: &str = "data/labels.csv";
pub const LABEL_FAILURES: &str = "data/label_failures.csv";
pub const METRICS_CSV: &str = "reports/metrics.csv";
pub const METRICS_JSON: &str = "reports/metrics.json";
pub const TABLE: &str = "reports/table.txt";
pub const BASELINES_CSV: &str = "reports/baselines.csv";
pub const BASELINES_TABLE: &str = "reports/baselines.txt";

/// Tolerance used for the generator's proportion report.
const PROPORTION_TOLERANCE: f64 = 0.02;

/// Display order of bases in reports.
const BASE_ORDER: [BaseKind; 2] = [BaseKind::Sknn, BaseKind::Sasrec];

pub fn display_name(kind: BaseKind) -> &'static str {
    match kind {
        BaseKind::Sknn => "SKNN",
        BaseKind::Sasrec => "SASRec",
    }
}

/// Unified baselines: file stem, row label and segment.
fn unified_specs(with_locality: bool) -> Vec<(&'static str, &'static str, SegmentSpec)> {
    use hybridrec_core::segments::{CategoryFilter, LocalityFilter};
    let mut v = vec![("global", "Unified All-Data", SegmentSpec::global())];
    if with_locality {
        v.push((
            "local_only",
            "Unified Local-Only",
            SegmentSpec::new(CategoryFilter::All, LocalityFilter::Local),
        ));
        v.push((
            "nonlocal_only",
            "Unified Non-Local-Only",
            SegmentSpec::new(CategoryFilter::All, LocalityFilter::NonLocal),
        ));
    }
    v
}

/// Stored evaluation output, re-rendered by the `report` stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub layout: ReportLayout,
    pub sections: Vec<(usize, String)>,
    pub reports: Vec<MetricsReport>,
    pub baselines: Vec<MetricsReport>,
}

impl EvalOutput {
    pub fn main_table(&self) -> Result<String, CliError> {
        let sections: Vec<(usize, &str)> = self.sections.iter().map(|(i, s)| (*i, s.as_str())).collect();
        Ok(compare_report(&self.reports)?.render_sections(&sections))
    }

    pub fn baseline_table(&self) -> Result<Option<String>, CliError> {
        if self.baselines.len() < 2 {
            return Ok(None);
        }
        Ok(Some(compare_report(&self.baselines)?.render()))
    }

    pub fn report(&self, model: &str) -> Option<&MetricsReport> {
        self.reports.iter().chain(&self.baselines).find(|r| r.model == model)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabelSummary {
    pub unknown: usize,
    pub labeled: usize,
    pub resumed: usize,
    pub failures: Vec<LabelFailure>,
}

/// One experiment directory and its manifest.
pub struct Run {
    pub config: ExperimentConfig,
    pub out: PathBuf,
    pub resume: bool,
    pub quiet: bool,
    manifest: RunManifest,
}

impl Run {
    pub fn open(config: ExperimentConfig, resume: bool) -> Result<Self, CliError> {
        config.validate()?;
        let out = config.out_dir.clone();
        fs::create_dir_all(&out).map_err(|e| CliError::io(out.display(), e))?;
        let mut manifest = RunManifest::load(&out)?.unwrap_or_default();
        let echo = serde_json::to_value(&config).expect("config serializes");
        manifest.tool_version = env!("CARGO_PKG_VERSION").to_string();
        manifest.seed = config.seed;
        manifest.config_hash = sha256_hex(echo.to_string().as_bytes());
        manifest.config = echo;
        let run = Run {
            config,
            out,
            resume,
            quiet: false,
            manifest,
        };
        run.manifest.save(&run.out)?;
        Ok(run)
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    /// Seed of a named stage, derived from the root seed.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_named(self.config.seed, stage)
    }

    fn log(&self, stage: &str, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("[{stage}] {}", msg.as_ref());
        }
    }

    fn file_hash(&self, rel: &str) -> Result<String, CliError> {
        hash_path(&self.path(rel))
    }

    /// True when resuming and `stage` finished under the same key with all
    /// outputs intact.
    fn reusable(&self, stage: &str, key: &str) -> bool {
        let Some(rec) = self.manifest.stages.get(stage) else {
            return false;
        };
        self.resume
            && rec.complete
            && rec.key == key
            && rec
                .outputs
                .iter()
                .all(|(rel, h)| self.file_hash(rel).map(|x| x == *h).unwrap_or(false))
    }

    /// True when resuming and this single output of `stage` is recorded
    /// under the same key and unchanged on disk.
    fn output_reusable(&self, stage: &str, key: &str, rel: &str) -> bool {
        let Some(rec) = self.manifest.stages.get(stage) else {
            return false;
        };
        self.resume
            && rec.key == key
            && rec
                .outputs
                .get(rel)
                .is_some_and(|h| self.file_hash(rel).map(|x| x == *h).unwrap_or(false))
    }

    fn begin(&mut self, stage: &str, key: &str, seed: Option<u64>) -> Result<(), CliError> {
        let keep = self.resume && self.manifest.stages.get(stage).is_some_and(|r| r.key == key);
        let rec = self.manifest.stages.entry(stage.to_string()).or_default();
        if !keep {
            *rec = StageRecord::default();
        }
        rec.key = key.to_string();
        rec.seed = seed;
        rec.complete = false;
        rec.note = None;
        self.manifest.save(&self.out)
    }

    fn record(&mut self, stage: &str, rel: &str) -> Result<(), CliError> {
        let h = self.file_hash(rel)?;
        self.manifest
            .stages
            .get_mut(stage)
            .expect("stage begun")
            .outputs
            .insert(rel.to_string(), h);
        self.manifest.save(&self.out)
    }

    fn finish(&mut self, stage: &str, note: Option<String>) -> Result<(), CliError> {
        let rec = self.manifest.stages.get_mut(stage).expect("stage begun");
        rec.complete = true;
        rec.note = note;
        self.manifest.save(&self.out)
    }

    fn mkdir_for(&self, rel: &str) -> Result<PathBuf, CliError> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent.display(), e))?;
        }
        Ok(p)
    }

    fn create(&self, rel: &str) -> Result<BufWriter<fs::File>, CliError> {
        let p = self.mkdir_for(rel)?;
        fs::File::create(&p)
            .map(BufWriter::new)
            .map_err(|e| CliError::io(p.display(), e))
    }

    fn require(&self, rel: &str, stage: &str) -> Result<PathBuf, CliError> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(CliError::missing_checkpoint(rel, stage))
        }
    }

    // ---- generate -------------------------------------------------------

    /// Writes the canonical articles and interactions files.
    pub fn generate(&mut self) -> Result<(), CliError> {
        const STAGE: &str = "generate";
        let seed = self.stage_seed(STAGE);
        let key = match &self.config.dataset {
            DatasetSource::Synthetic { generator_path: Some(p), .. } => {
                json!({"dataset": self.config.dataset, "seed": seed, "generator_file": hash_path(p).ok()})
            }
            DatasetSource::Synthetic { .. } => json!({"dataset": self.config.dataset, "seed": seed}),
            DatasetSource::Ingest {
                articles, interactions, ..
            } => json!({
                "dataset": self.config.dataset,
                "articles": hash_path(articles).ok(),
                "interactions": hash_path(interactions).ok(),
            }),
        };
        let key = sha256_hex(key.to_string().as_bytes());
        if self.reusable(STAGE, &key) {
            self.log(STAGE, "up to date");
            return Ok(());
        }
        self.begin(STAGE, &key, Some(seed))?;
        match self.config.dataset.clone() {
            DatasetSource::Synthetic {
                generator,
                generator_path,
                target_clicks,
            } => {
                let mut cfg = match generator_path {
                    Some(p) => {
                        let text = fs::read_to_string(&p)
                            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                        GeneratorConfig::from_toml(&text)?
                    }
                    None => generator,
                };
                cfg.seed = seed;
                if let Some(n) = target_clicks {
                    cfg = cfg.scaled_to_clicks(n);
                }
                cfg.validate()?;
                let ds = generate(&cfg)?;
                write_articles(self.create(ARTICLES)?, &ds.catalog)?;
                write_interactions(self.create(INTERACTIONS)?, &ds.interactions())?;
                write_atomic(&self.mkdir_for("data/generator.toml")?, cfg.to_toml().as_bytes())?;
                let check = validate_proportions(&ds, &cfg, PROPORTION_TOLERANCE);
                let mut text = String::from("category,locality,target,empirical,abs_error,pass\n");
                for c in &check.cells {
                    text.push_str(&format!(
                        "{},{},{:.6},{:.6},{:.6},{}\n",
                        c.category, c.locality, c.target, c.empirical, c.abs_error, c.pass
                    ));
                }
                write_atomic(&self.mkdir_for("data/proportions.csv")?, text.as_bytes())?;
                for rel in [ARTICLES, INTERACTIONS, "data/generator.toml", "data/proportions.csv"] {
                    self.record(STAGE, rel)?;
                }
                self.log(
                    STAGE,
                    format!(
                        "{} articles, {} sessions, {} clicks",
                        ds.catalog.len(),
                        ds.sessions.len(),
                        ds.n_clicks()
                    ),
                );
                self.finish(STAGE, Some(format!("{} clicks", ds.n_clicks())))
            }
            DatasetSource::Ingest {
                articles,
                interactions,
                format,
                ..
            } => {
                let catalog = parse_articles(&articles, format.into())?;
                let rows = parse_interactions(&interactions)?;
                if let Some(r) = rows.iter().find(|r| catalog.lookup(&r.article_id).is_none()) {
                    return Err(CliError::Data(format!(
                        "interaction references unknown article `{}`",
                        r.article_id
                    )));
                }
                write_articles(self.create(ARTICLES)?, &catalog)?;
                write_interactions(self.create(INTERACTIONS)?, &rows)?;
                for rel in [ARTICLES, INTERACTIONS] {
                    self.record(STAGE, rel)?;
                }
                self.log(STAGE, format!("{} articles, {} interactions", catalog.len(), rows.len()));
                self.finish(STAGE, None)
            }
        }
    }

    // ---- label ----------------------------------------------------------

    /// Labels articles of unknown locality. Partial labels are written even
    /// when some articles fail; the stage then returns an error.
    pub fn label(&mut self) -> Result<LabelSummary, CliError> {
        const STAGE: &str = "label";
        let src = self.require(ARTICLES, "generate")?;
        let mut catalog = read_catalog(&src)?;
        let unknown: Vec<ItemId> = catalog
            .item_ids()
            .filter(|i| catalog.article(*i).locality == Locality::Unknown)
            .collect();
        let texts_path = match &self.config.dataset {
            DatasetSource::Ingest { article_texts, .. } => article_texts.clone(),
            DatasetSource::Synthetic { .. } => None,
        };
        let mut labeler_echo = serde_json::to_value(&self.config.labeler).expect("labeler config serializes");
        labeler_echo["concurrency"] = json!(null);
        let key = sha256_hex(
            json!({
                "labeler": labeler_echo,
                "articles": self.file_hash(ARTICLES)?,
                "texts": texts_path.as_ref().and_then(|p| hash_path(p).ok()),
            })
            .to_string()
            .as_bytes(),
        );
        let mut summary = LabelSummary {
            unknown: unknown.len(),
            ..Default::default()
        };
        if unknown.is_empty() {
            self.begin(STAGE, &key, None)?;
            let stale = self.path(LABELED_ARTICLES);
            if stale.exists() {
                fs::remove_file(&stale).map_err(|e| CliError::io(stale.display(), e))?;
            }
            self.log(STAGE, "every article already has a locality");
            self.finish(STAGE, Some("nothing to label".into()))?;
            return Ok(summary);
        }
        if self.reusable(STAGE, &key) {
            self.log(STAGE, "up to date");
            summary.labeled = unknown.len();
            summary.resumed = unknown.len();
            return Ok(summary);
        }
        let texts_path = texts_path.ok_or_else(|| {
            CliError::Config(format!(
                "{} articles have unknown locality; dataset.article_texts is required to label them",
                unknown.len()
            ))
        })?;
        let resuming = self.resume && self.manifest.stages.get(STAGE).is_some_and(|r| r.key == key);
        self.begin(STAGE, &key, None)?;
        let progress = self.mkdir_for(LABEL_PROGRESS)?;
        if !resuming && progress.exists() {
            fs::remove_file(&progress).map_err(|e| CliError::io(progress.display(), e))?;
        }

        let file = fs::File::open(&texts_path).map_err(|e| CliError::Data(format!("{}: {e}", texts_path.display())))?;
        let texts = read_article_texts(file)?;
        let wanted: BTreeSet<&str> = unknown.iter().map(|i| catalog.article(*i).id.as_str()).collect();
        let todo: Vec<_> = texts
            .into_iter()
            .filter(|t| wanted.contains(t.article_id.as_str()))
            .collect();
        let have: BTreeSet<&str> = todo.iter().map(|t| t.article_id.as_str()).collect();
        let mut failures: Vec<LabelFailure> = wanted
            .iter()
            .filter(|id| !have.contains(*id))
            .map(|id| LabelFailure {
                article_id: id.to_string(),
                reason: "no article text".into(),
            })
            .collect();

        let labeler = Labeler::from_config(self.config.labeler.clone())?;
        self.log(STAGE, format!("labeling {} articles", todo.len()));
        let outcome = labeler.label_corpus(&todo, Some(&progress))?;
        for (id, loc) in &outcome.labels {
            if let Some(item) = catalog.lookup(id) {
                if catalog.article(item).locality == Locality::Unknown {
                    catalog.set_locality(item, *loc);
                    summary.labeled += 1;
                }
            }
        }
        failures.extend(outcome.failures);
        failures.sort_by(|a, b| a.article_id.cmp(&b.article_id));
        summary.resumed = outcome.resumed;

        write_articles(self.create(LABELED_ARTICLES)?, &catalog)?;
        let mut text = String::from("article_id,reason\n");
        for f in &failures {
            text.push_str(&format!("{},\"{}\"\n", f.article_id, f.reason.replace('"', "\"\"")));
        }
        write_atomic(&self.path(LABEL_FAILURES), text.as_bytes())?;
        self.record(STAGE, LABELED_ARTICLES)?;
        summary.failures = failures;
        if !summary.failures.is_empty() {
            return Err(CliError::Runtime(format!(
                "labeling failed for {} of {} articles; partial labels in {LABELED_ARTICLES}, failures in {LABEL_FAILURES}",
                summary.failures.len(),
                summary.unknown
            )));
        }
        self.log(STAGE, format!("{} labeled ({} from progress file)", summary.labeled, summary.resumed));
        self.finish(STAGE, Some(format!("{} labeled", summary.labeled)))?;
        Ok(summary)
    }

    // ---- shared inputs --------------------------------------------------

    /// Relative path of the catalog used for training and evaluation.
    fn catalog_file(&self) -> Result<&'static str, CliError> {
        if self.path(LABELED_ARTICLES).exists() {
            Ok(LABELED_ARTICLES)
        } else if self.path(ARTICLES).exists() {
            Ok(ARTICLES)
        } else {
            Err(CliError::missing_checkpoint(ARTICLES, "generate"))
        }
    }

    pub fn load_inputs(&self) -> Result<(Catalog, SplitBundle), CliError> {
        let catalog = read_catalog(&self.path(self.catalog_file()?))?;
        let unknown = catalog
            .articles()
            .iter()
            .filter(|a| a.locality == Locality::Unknown)
            .count();
        if unknown > 0 {
            return Err(CliError::Data(format!(
                "{unknown} articles have unknown locality; run the `label` stage first"
            )));
        }
        let rows = parse_interactions(&self.require(INTERACTIONS, "generate")?)?;
        let sessions = sessionize(&rows, self.config.session_gap_secs, &catalog)?;
        let split = chronological_split(&sessions, self.config.split)?;
        Ok((catalog, split))
    }

    fn input_hashes(&self) -> Result<serde_json::Value, CliError> {
        Ok(json!({
            "catalog": self.file_hash(self.catalog_file()?)?,
            "interactions": self.file_hash(INTERACTIONS)?,
            "gap": self.config.session_gap_secs,
            "split": self.config.split,
        }))
    }

    fn base_config(&self, kind: BaseKind, seed: u64) -> BaseConfig {
        match kind {
            BaseKind::Sasrec => BaseConfig::Sasrec(SasrecConfig {
                seed,
                ..self.config.sasrec.clone()
            }),
            BaseKind::Sknn => BaseConfig::Sknn(self.config.sknn),
        }
    }

    fn unified_rel(kind: BaseKind, stem: &str) -> String {
        format!("models/{}/unified/{stem}.{}", kind.as_str(), kind.as_str())
    }

    fn registry_rel(kind: BaseKind) -> String {
        format!("models/{}/registry", kind.as_str())
    }

    fn fusion_rel(kind: BaseKind) -> String {
        format!("models/{}/fusion.bin", kind.as_str())
    }

    // ---- train ----------------------------------------------------------

    /// Trains the unified baselines and the expert registry of every base.
    /// Finished checkpoints are reused on resume.
    pub fn train(&mut self) -> Result<(), CliError> {
        let (catalog, split) = self.load_inputs()?;
        let inputs = self.input_hashes()?;
        for kind in self.config.bases.clone() {
            let stage = format!("train:{}", kind.as_str());
            let params = match kind {
                BaseKind::Sasrec => json!(self.config.sasrec),
                BaseKind::Sknn => json!(self.config.sknn),
            };
            let seed = self.stage_seed(&format!("train/{}", kind.as_str()));
            let key = sha256_hex(
                json!({
                    "inputs": inputs,
                    "params": params,
                    "seed": seed,
                    "scheme": self.config.scheme,
                    "sparse_floor": self.config.sparse_floor,
                    "locality_baselines": self.config.locality_baselines,
                    "global_expert": self.config.global_expert,
                })
                .to_string()
                .as_bytes(),
            );
            if self.reusable(&stage, &key) {
                self.log(&stage, "up to date");
                continue;
            }
            self.begin(&stage, &key, Some(seed))?;

            for (stem, _, spec) in unified_specs(self.config.locality_baselines) {
                let rel = Self::unified_rel(kind, stem);
                if self.output_reusable(&stage, &key, &rel) {
                    self.log(&stage, format!("{stem}: reusing checkpoint"));
                    continue;
                }
                let train = filter_interactions(&split.train, &spec, &catalog);
                let validation = filter_interactions(&split.validation, &spec, &catalog);
                self.log(&stage, format!("{stem}: training on {} sessions", train.len()));
                let base = self.base_config(kind, derive_named(seed, stem));
                let model = Submodel::train(&train, &validation, &base)
                    .map_err(|e| CliError::from(e).context(&format!("{} {stem} baseline", display_name(kind))))?;
                let path = self.mkdir_for(&rel)?;
                remove_any(&path)?;
                model.save(&path, &catalog)?;
                self.record(&stage, &rel)?;
            }

            let mut scheme = build_scheme(&catalog, self.config.scheme);
            if self.config.global_expert {
                scheme = scheme.with_global();
            }
            let base = self.base_config(kind, derive_named(seed, "registry"));
            let dir_rel = Self::registry_rel(kind);
            let mut entries: Vec<RegistryEntry> = Vec::with_capacity(scheme.len());
            for (i, spec) in scheme.segments.iter().enumerate() {
                let rel = format!("{dir_rel}/{}", checkpoint_name(i, kind));
                if self.output_reusable(&stage, &key, &rel) {
                    let model = Submodel::load(&self.path(&rel), kind, &catalog)?;
                    let n = filter_interactions(&split.train, spec, &catalog).len();
                    self.log(&stage, format!("{}: reusing checkpoint", spec.name));
                    entries.push(RegistryEntry {
                        spec: spec.clone(),
                        n_train_sessions: n,
                        sparse: n < self.config.sparse_floor,
                        model: Some(model),
                        failure: None,
                    });
                    continue;
                }
                let entry = train_segment(&split, spec, i, &catalog, &base, self.config.sparse_floor);
                match (&entry.model, &entry.failure) {
                    (Some(m), _) => {
                        let path = self.mkdir_for(&rel)?;
                        remove_any(&path)?;
                        m.save(&path, &catalog)?;
                        self.record(&stage, &rel)?;
                        self.log(
                            &stage,
                            format!(
                                "{}: {} sessions{}",
                                spec.name,
                                entry.n_train_sessions,
                                if entry.sparse { " (sparse)" } else { "" }
                            ),
                        );
                    }
                    (None, f) => self.log(
                        &stage,
                        format!("{}: not trained ({})", spec.name, f.as_deref().unwrap_or("unknown")),
                    ),
                }
                entries.push(entry);
            }
            let registry = SubmodelRegistry::assemble(scheme, kind, entries, catalog.clone())?;
            registry.save(&self.path(&dir_rel))?;
            for f in ["manifest.csv", "scheme.json"] {
                self.record(&stage, &format!("{dir_rel}/{f}"))?;
            }
            let trained = registry.entries.iter().filter(|e| e.model.is_some()).count();
            self.finish(
                &stage,
                Some(format!(
                    "{trained}/{} experts, fingerprint {}",
                    registry.len(),
                    registry.fingerprint()
                )),
            )?;
        }
        Ok(())
    }

    fn load_registry(&self, kind: BaseKind, catalog: &Catalog) -> Result<SubmodelRegistry, CliError> {
        let dir = Self::registry_rel(kind);
        self.require(&format!("{dir}/manifest.csv"), "train")?;
        Ok(SubmodelRegistry::load(&self.path(&dir), catalog)?)
    }

    // ---- fuse -----------------------------------------------------------

    pub fn fuse(&mut self) -> Result<(), CliError> {
        let (catalog, split) = self.load_inputs()?;
        let inputs = self.input_hashes()?;
        for kind in self.config.bases.clone() {
            let stage = format!("fuse:{}", kind.as_str());
            let registry = self.load_registry(kind, &catalog)?;
            let seed = self.stage_seed(&format!("fuse/{}", kind.as_str()));
            let key = sha256_hex(
                json!({
                    "inputs": inputs,
                    "fusion": self.config.fusion,
                    "registry": registry.fingerprint(),
                    "seed": seed,
                })
                .to_string()
                .as_bytes(),
            );
            if self.reusable(&stage, &key) {
                self.log(&stage, "up to date");
                continue;
            }
            self.begin(&stage, &key, Some(seed))?;
            let cfg = FusionConfig {
                seed,
                ..self.config.fusion.clone()
            };
            self.log(&stage, format!("training fusion over {} experts", registry.len()));
            let (model, report) = train_fusion(&registry, &split.train, &split.validation, &catalog, &cfg)?;
            let rel = Self::fusion_rel(kind);
            let mut buf = Vec::new();
            model.save(&mut buf)?;
            write_atomic(&self.mkdir_for(&rel)?, &buf)?;
            self.record(&stage, &rel)?;
            let note = format!(
                "{} examples, final loss {:.4}, train accuracy {:.4}",
                report.n_examples,
                report.epoch_losses.last().copied().unwrap_or(f64::NAN),
                report.train_accuracy
            );
            self.log(&stage, &note);
            self.finish(&stage, Some(note))?;
        }
        Ok(())
    }

    fn load_fusion(&self, kind: BaseKind, registry: &SubmodelRegistry) -> Result<FusionModel, CliError> {
        let rel = Self::fusion_rel(kind);
        let bytes = fs::read(self.require(&rel, "fuse")?).map_err(|e| CliError::io(&rel, e))?;
        Ok(FusionModel::load(bytes.as_slice(), registry)?)
    }

    // ---- evaluate -------------------------------------------------------

    /// Evaluates every table row on the same test events and writes the
    /// reports and tables.
    pub fn evaluate(&mut self) -> Result<EvalOutput, CliError> {
        const STAGE: &str = "evaluate";
        let (catalog, split) = self.load_inputs()?;
        let bases: Vec<BaseKind> = BASE_ORDER.into_iter().filter(|b| self.config.bases.contains(b)).collect();
        let layout = self.config.eval.layout;
        let mut model_files = Vec::new();
        for &kind in &bases {
            for (stem, _, _) in unified_specs(self.config.locality_baselines) {
                model_files.push((Self::unified_rel(kind, stem), "train"));
            }
            model_files.push((format!("{}/manifest.csv", Self::registry_rel(kind)), "train"));
            model_files.push((Self::fusion_rel(kind), "fuse"));
        }
        let mut hashes = Vec::new();
        for (rel, stage) in &model_files {
            self.require(rel, stage)?;
            hashes.push(self.file_hash(rel)?);
        }
        let key = sha256_hex(
            json!({"inputs": self.input_hashes()?, "eval": self.config.eval, "models": hashes, "locality_baselines": self.config.locality_baselines})
                .to_string()
                .as_bytes(),
        );
        if self.reusable(STAGE, &key) {
            if let Ok(out) = self.read_eval_output() {
                self.log(STAGE, "up to date");
                return Ok(out);
            }
        }
        self.begin(STAGE, &key, None)?;

        let events = enumerate_events(&split.test, self.config.eval.last_click_only);
        if events.is_empty() {
            return Err(CliError::Data("the test split has no prediction events".into()));
        }
        let vocab = split.train_vocabulary();
        let ks = self.config.eval.ks.clone();
        let n = catalog.len();
        self.log(STAGE, format!("{} events, vocabulary {}", events.len(), vocab.len()));

        let mut globals = Vec::new();
        let mut fused = Vec::new();
        let mut baselines = Vec::new();
        for &kind in &bases {
            let name = display_name(kind);
            for (stem, label, _) in unified_specs(self.config.locality_baselines) {
                let model = Submodel::load(&self.path(&Self::unified_rel(kind, stem)), kind, &catalog)?;
                let r = evaluate(&format!("{name} ({label})"), &ScorerRecommender(&model), &events, &vocab, n, &ks)?;
                self.log(STAGE, format!("{}: {:?}", r.model, r.hit_rates));
                if stem == "global" {
                    globals.push(MetricsReport {
                        model: format!("{name} (Global)"),
                        ..r.clone()
                    });
                }
                baselines.push(r);
            }
            let registry = self.load_registry(kind, &catalog)?;
            let fusion = self.load_fusion(kind, &registry)?;
            if layout == ReportLayout::Full {
                let r = evaluate(
                    &format!("{name} + Ensemble Fusion"),
                    &MeanRankRecommender(&registry),
                    &events,
                    &vocab,
                    n,
                    &ks,
                )?;
                self.log(STAGE, format!("{}: {:?}", r.model, r.hit_rates));
                fused.push(r);
            }
            let r = evaluate(
                &format!("{name} + NN Fusion"),
                &FusionRecommender {
                    model: &fusion,
                    panel: &registry,
                },
                &events,
                &vocab,
                n,
                &ks,
            )?;
            self.log(STAGE, format!("{}: {:?}", r.model, r.hit_rates));
            fused.push(r);
        }

        let (reports, sections) = match layout {
            ReportLayout::Full => {
                let sections = vec![
                    (0, "Global models".to_string()),
                    (globals.len(), "Fused category/locality experts".to_string()),
                ];
                (globals.into_iter().chain(fused).collect::<Vec<_>>(), sections)
            }
            ReportLayout::GlobalVsFusion => {
                let mut rows = Vec::new();
                for (g, f) in globals.into_iter().zip(fused) {
                    rows.push(g);
                    rows.push(f);
                }
                (rows, Vec::new())
            }
        };
        if let Some(r) = reports.iter().chain(&baselines).find(|r| !r.is_monotone()) {
            return Err(CliError::Runtime(format!("non-monotone hit rates for {}", r.model)));
        }
        let out = EvalOutput {
            layout,
            sections,
            reports,
            baselines,
        };
        self.write_eval_output(&out)?;
        self.finish(STAGE, Some(format!("{} events", events.len())))?;
        Ok(out)
    }

    fn write_eval_output(&mut self, out: &EvalOutput) -> Result<(), CliError> {
        const STAGE: &str = "evaluate";
        let mut csv = Vec::new();
        write_reports_csv(&mut csv, &out.reports)?;
        write_atomic(&self.mkdir_for(METRICS_CSV)?, &csv)?;
        let mut json = serde_json::to_string_pretty(out).expect("reports serialize");
        json.push('\n');
        write_atomic(&self.path(METRICS_JSON), json.as_bytes())?;
        let table = if out.reports.len() >= 2 {
            out.main_table()?
        } else {
            String::new()
        };
        write_atomic(&self.path(TABLE), table.as_bytes())?;
        let mut outputs = vec![METRICS_CSV, METRICS_JSON, TABLE];
        if let Some(t) = out.baseline_table()? {
            let mut csv = Vec::new();
            write_reports_csv(&mut csv, &out.baselines)?;
            write_atomic(&self.path(BASELINES_CSV), &csv)?;
            write_atomic(&self.path(BASELINES_TABLE), t.as_bytes())?;
            outputs.extend([BASELINES_CSV, BASELINES_TABLE]);
        }
        for rel in outputs {
            self.record(STAGE, rel)?;
        }
        Ok(())
    }

    pub fn read_eval_output(&self) -> Result<EvalOutput, CliError> {
        let p = self.require(METRICS_JSON, "evaluate")?;
        let bytes = fs::read(&p).map_err(|e| CliError::io(p.display(), e))?;
        serde_json::from_slice(&bytes).map_err(|e| CliError::Data(format!("{METRICS_JSON}: {e}")))
    }

    // ---- report ---------------------------------------------------------

    /// Renders the stored comparison tables.
    pub fn report(&self) -> Result<String, CliError> {
        let out = self.read_eval_output()?;
        let mut text = out.main_table()?;
        if let Some(t) = out.baseline_table()? {
            text.push('\n');
            text.push_str(&t);
        }
        Ok(text)
    }

    /// Every stage in order.
    pub fn run_all(&mut self) -> Result<EvalOutput, CliError> {
        self.generate()?;
        self.label()?;
        self.train()?;
        self.fuse()?;
        self.evaluate()
    }
}

fn read_catalog(path: &Path) -> Result<Catalog, CliError> {
    Ok(parse_articles(path, ArticleFormat::EbnerdCsv)?)
}

fn remove_any(path: &Path) -> Result<(), CliError> {
    let r = if path.is_dir() {
        fs::remove_dir_all(path)
    } else if path.exists() {
        fs::remove_file(path)
    } else {
        Ok(())
    };
    r.map_err(|e| CliError::io(path.display(), e))
}

impl CliError {
    fn context(self, what: &str) -> Self {
        match self {
            CliError::Config(m) => CliError::Config(format!("{what}: {m}")),
            CliError::Data(m) => CliError::Data(format!("{what}: {m}")),
            CliError::Runtime(m) => CliError::Runtime(format!("{what}: {m}")),
        }
    }
}
