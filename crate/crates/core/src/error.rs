use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Matrix failed the SPD acceptance test or could not be inverted.
    #[error("singular matrix: {0}")]
    Singular(String),

    /// Argument outside the mathematical domain of a function.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    /// Parameters lie in the degenerate set where the mixture collapses to a
    /// single effective component.
    #[error("degenerate parameters: {0}")]
    DegenerateParameters(String),

    #[error("degenerate template at voxel {voxel}: all weighted prior probabilities vanish")]
    DegenerateTemplate { voxel: usize },

    #[error("degenerate cluster {component}: {reason}")]
    DegenerateCluster { component: usize, reason: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}
