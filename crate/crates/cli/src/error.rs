use hybridrec_core::corpus::CorpusError;
use hybridrec_core::eval::EvalError;
use hybridrec_core::fusion::FusionError;
use hybridrec_core::sasrec::SasrecError;
use hybridrec_core::segments::SegmentsError;
use hybridrec_core::sknn::SknnError;
use hybridrec_core::syngen::SyngenError;
use hybridrec_labeler::LabelError;
use thiserror::Error;

/// Pipeline failure, classified by process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    pub fn missing_checkpoint(path: &str, stage: &str) -> Self {
        CliError::Data(format!("missing checkpoint `{path}`; run the `{stage}` stage first"))
    }

    pub(crate) fn io(what: impl std::fmt::Display, e: std::io::Error) -> Self {
        CliError::Runtime(format!("{what}: {e}"))
    }
}

impl From<SyngenError> for CliError {
    fn from(e: SyngenError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::InvalidArgument(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<SasrecError> for CliError {
    fn from(e: SasrecError) -> Self {
        match e {
            SasrecError::ConfigInvalid(_) => CliError::Config(e.to_string()),
            SasrecError::EmptyVocabulary | SasrecError::NoTrainableEvents | SasrecError::Checkpoint(_) => {
                CliError::Data(e.to_string())
            }
            SasrecError::NonFinite(_) | SasrecError::Io(_) => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<SknnError> for CliError {
    fn from(e: SknnError) -> Self {
        match e {
            SknnError::ConfigInvalid(_) => CliError::Config(e.to_string()),
            SknnError::Io(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<SegmentsError> for CliError {
    fn from(e: SegmentsError) -> Self {
        match e {
            SegmentsError::Sasrec(e) => e.into(),
            SegmentsError::Sknn(e) => e.into(),
            SegmentsError::Io(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<FusionError> for CliError {
    fn from(e: FusionError) -> Self {
        match e {
            FusionError::ConfigInvalid(_) => CliError::Config(e.to_string()),
            FusionError::InvalidPosition(_) | FusionError::Io(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::InvalidCutoffs => CliError::Config(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<LabelError> for CliError {
    fn from(e: LabelError) -> Self {
        match e {
            LabelError::Config(_) => CliError::Config(e.to_string()),
            LabelError::Csv(_) | LabelError::Progress(_) => CliError::Data(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}
