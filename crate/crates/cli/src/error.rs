use std::fmt;
use std::io;
use std::path::Path;

use survey_sentiment::analysis::AnalysisError;
use survey_sentiment::corpus::CorpusError;
use survey_sentiment::encoder::ModelError;
use survey_sentiment::nn::NnError;
use survey_sentiment::tokenizer::TokenizerError;
use survey_sentiment::training::TrainError;

/// Exit code 2: bad flags, bad config, missing or unusable inputs.
pub const EXIT_USAGE: u8 = 2;
/// Exit code 1: failures while computing or writing results.
pub const EXIT_RUNTIME: u8 = 1;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self::Usage(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        Self::Runtime(msg.into())
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => EXIT_USAGE,
            Self::Runtime(_) => EXIT_RUNTIME,
        }
    }

    pub fn missing(what: &str, path: &Path) -> Self {
        Self::Usage(format!("{what} not found: {}", path.display()))
    }

    pub fn write(path: &Path, err: io::Error) -> Self {
        Self::Runtime(format!("cannot write {}: {err}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Usage(m) | Self::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Io { ref source, .. } if source.kind() != io::ErrorKind::NotFound => {
                Self::Runtime(e.to_string())
            }
            other => Self::Usage(other.to_string()),
        }
    }
}

impl From<TokenizerError> for CliError {
    fn from(e: TokenizerError) -> Self {
        match e {
            TokenizerError::Io { .. } => Self::Runtime(e.to_string()),
            other => Self::Usage(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_)
            | ModelError::SequenceTooLong { .. }
            | ModelError::Mismatch(_)
            | ModelError::Nn(NnError::Checkpoint(_)) => Self::Usage(e.to_string()),
            other => Self::Runtime(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(m) => m.into(),
            TrainError::Tokenizer(t) => t.into(),
            TrainError::Corpus(c) => c.into(),
            TrainError::NonFiniteLoss { .. } | TrainError::Nn(_) => Self::Runtime(e.to_string()),
            other => Self::Usage(other.to_string()),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Model(m) => m.into(),
            other => Self::Usage(other.to_string()),
        }
    }
}
