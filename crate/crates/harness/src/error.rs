use shadowcert_core::Error as CoreError;

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("rejected input: {0}")]
    Invalid(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("report {path}: {message}")]
    Verify { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        HarnessError::Invalid(msg.into())
    }

    /// Whether the failure is the caller's fault rather than a runtime one.
    /// A missing input file counts as the caller's fault.
    pub fn is_input_error(&self) -> bool {
        let missing = |e: &std::io::Error| e.kind() == std::io::ErrorKind::NotFound;
        match self {
            HarnessError::Invalid(_) => true,
            HarnessError::Core(CoreError::Io(e)) | HarnessError::Io(e) => missing(e),
            HarnessError::Core(e) => matches!(
                e,
                CoreError::InvalidInput(_)
                    | CoreError::ShapeMismatch { .. }
                    | CoreError::InvalidConfig(_)
                    | CoreError::Parse { .. }
                    | CoreError::UnsupportedVersion(_)
            ),
            HarnessError::Csv(_) | HarnessError::Verify { .. } => false,
        }
    }
}
