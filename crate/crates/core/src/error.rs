use std::fmt;

use crate::attack::StepRecord;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("rejected input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("rejected configuration: {0}")]
    InvalidConfig(String),

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    TrainingDiverged { epoch: usize },

    #[error("attack diverged at step {step}: non-finite objective")]
    AttackDiverged { step: usize, trace: Vec<StepRecord> },

    #[error("parse error at byte {offset} in {section}: {message}")]
    Parse {
        offset: usize,
        section: Section,
        message: String,
    },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}

/// Region of a binary container in which a parse failure happened.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Section {
    Magic,
    Version,
    Header,
    Layer(usize),
    Labels,
    Pixels,
    Trailing,
}

impl fmt::Display for Section {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Section::Magic => f.write_str("magic"),
            Section::Version => f.write_str("version"),
            Section::Header => f.write_str("header"),
            Section::Layer(i) => write!(f, "layer {i}"),
            Section::Labels => f.write_str("labels"),
            Section::Pixels => f.write_str("pixels"),
            Section::Trailing => f.write_str("trailing data"),
        }
    }
}
