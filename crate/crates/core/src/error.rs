use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("value out of domain: {0}")]
    Domain(String),

    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },

    #[error("layout error: {0}")]
    Layout(String),

    #[error("guidance composition is missing the forward for condition set {0}")]
    Composition(String),

    #[error("guidance weights violate: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("cannot start: {0}")]
    Startup(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
