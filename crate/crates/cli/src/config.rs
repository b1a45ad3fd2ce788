use std::path::{Path, PathBuf};

use hybridrec_core::corpus::{ArticleFormat, SplitRatios, DEFAULT_SESSION_GAP_SECS};
use hybridrec_core::eval::DEFAULT_KS;
use hybridrec_core::fusion::FusionConfig;
use hybridrec_core::sasrec::SasrecConfig;
use hybridrec_core::segments::{BaseKind, SchemeStyle, DEFAULT_SPARSE_FLOOR};
use hybridrec_core::sknn::SknnConfig;
use hybridrec_core::syngen::GeneratorConfig;
use hybridrec_labeler::LabelerConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Everything one experiment needs. Seeds inside the module sections are
/// ignored; every stage derives its own from `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetSource,
    pub split: SplitRatios,
    pub session_gap_secs: u64,
    pub scheme: SchemeStyle,
    /// Base recommenders to train; each gets unified baselines, a registry
    /// and a fusion model.
    pub bases: Vec<BaseKind>,
    pub sparse_floor: usize,
    /// Also train and report the local-only and non-local-only baselines.
    pub locality_baselines: bool,
    /// Adds an all-data segment to every expert registry.
    pub global_expert: bool,
    pub sasrec: SasrecConfig,
    pub sknn: SknnConfig,
    pub fusion: FusionConfig,
    pub labeler: LabelerConfig,
    pub eval: EvalSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            dataset: DatasetSource::default(),
            split: SplitRatios::default(),
            session_gap_secs: DEFAULT_SESSION_GAP_SECS,
            scheme: SchemeStyle::PerCategoryPlusPooled,
            bases: vec![BaseKind::Sknn, BaseKind::Sasrec],
            sparse_floor: DEFAULT_SPARSE_FLOOR,
            locality_baselines: true,
            global_expert: false,
            sasrec: SasrecConfig::default(),
            sknn: SknnConfig::default(),
            fusion: FusionConfig::default(),
            labeler: LabelerConfig::default(),
            eval: EvalSettings::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic {
        #[serde(default)]
        generator: GeneratorConfig,
        /// Generator TOML; replaces the inline table when set.
        #[serde(default)]
        generator_path: Option<PathBuf>,
        /// Rescales the user count to hit roughly this many clicks.
        #[serde(default)]
        target_clicks: Option<usize>,
    },
    Ingest {
        articles: PathBuf,
        interactions: PathBuf,
        #[serde(default)]
        format: IngestFormat,
        /// `article_id,title,subtitle,body`; needed to label unknown localities.
        #[serde(default)]
        article_texts: Option<PathBuf>,
    },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic {
            generator: GeneratorConfig::default(),
            generator_path: None,
            target_clicks: Some(50_000),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IngestFormat {
    SyracuseCsv,
    #[default]
    EbnerdCsv,
}

impl From<IngestFormat> for ArticleFormat {
    fn from(f: IngestFormat) -> Self {
        match f {
            IngestFormat::SyracuseCsv => ArticleFormat::SyracuseCsv,
            IngestFormat::EbnerdCsv => ArticleFormat::EbnerdCsv,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub ks: Vec<usize>,
    pub last_click_only: bool,
    pub layout: ReportLayout,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            ks: DEFAULT_KS.to_vec(),
            last_click_only: false,
            layout: ReportLayout::Full,
        }
    }
}

/// Rows of the main comparison table.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportLayout {
    /// Global models, then mean-rank and neural fusion for every base.
    #[default]
    Full,
    /// Global model against neural fusion only.
    GlobalVsFusion,
}

impl ExperimentConfig {
    /// Parses a TOML file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        match &mut self.dataset {
            DatasetSource::Synthetic { generator_path, .. } => {
                if let Some(p) = generator_path {
                    fix(p)
                }
            }
            DatasetSource::Ingest {
                articles,
                interactions,
                article_texts,
                ..
            } => {
                fix(articles);
                fix(interactions);
                if let Some(p) = article_texts {
                    fix(p)
                }
            }
        }
        if let Some(p) = &mut self.labeler.mock_fixture {
            fix(p);
        }
    }

    /// Checks this config and every module config it carries.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Config(m.to_string()));
        self.split.validate()?;
        if self.session_gap_secs == 0 {
            return bad("session_gap_secs must be positive");
        }
        if self.bases.is_empty() {
            return bad("bases must name at least one base model");
        }
        if (1..self.bases.len()).any(|i| self.bases[..i].contains(&self.bases[i])) {
            return bad("bases must not repeat");
        }
        let ks = &self.eval.ks;
        if ks.is_empty() || ks[0] == 0 || ks.windows(2).any(|w| w[0] >= w[1]) {
            return bad("eval.ks must be positive and strictly ascending");
        }
        self.sasrec.validate()?;
        if self.sknn.k == 0 || self.sknn.sample_size == 0 {
            return bad("sknn.k and sknn.sample_size must be positive");
        }
        self.fusion.validate()?;
        if self.labeler.concurrency == 0 {
            return bad("labeler.concurrency must be at least 1");
        }
        if let DatasetSource::Synthetic {
            generator,
            generator_path: None,
            target_clicks,
        } = &self.dataset
        {
            generator.validate()?;
            if *target_clicks == Some(0) {
                return bad("target_clicks must be positive");
            }
        }
        Ok(())
    }
}
