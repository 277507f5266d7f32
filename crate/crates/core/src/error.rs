use alloc::boxed::Box;
use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("cannot aggregate: level with patch size {0} already covers the image")]
    CannotAggregate(usize),
    #[error("numerical divergence: {0}")]
    NumericalDivergence(String),
    #[error("no motion detected in sequence")]
    NoMotionDetected,
    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),
    #[error("frame pair {frame}: {source}")]
    AtFrame { frame: usize, source: Box<Error> },
    #[error("subject {subject}: {source}")]
    AtSubject { subject: String, source: Box<Error> },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn diverged(msg: impl Into<String>) -> Self {
        Error::NumericalDivergence(msg.into())
    }

    /// Strips frame/subject context and returns the underlying error.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtFrame { source, .. } | Error::AtSubject { source, .. } => source.root(),
            other => other,
        }
    }

    /// True when the underlying cause is a numerical failure.
    pub fn is_numerical(&self) -> bool {
        matches!(self.root(), Error::NumericalDivergence(_))
    }
}

pub type Result<T> = core::result::Result<T, Error>;
