use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two operands disagree on shape or dimension.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{what} out of range: {value} (valid: {valid})")]
    Range {
        what: &'static str,
        value: String,
        valid: String,
    },

    /// Spatial sizes that the network geometry cannot accept.
    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("singular coefficient at timestep {t}: alpha_bar = {alpha_bar}")]
    SingularCoefficient { t: usize, alpha_bar: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    #[error("estimation error: {0}")]
    Estimation(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("non-finite loss at step {step} (seed {seed}); diagnostic snapshot at {}", snapshot.display())]
    NonFiniteLoss { step: usize, seed: u64, snapshot: PathBuf },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn geometry(msg: impl Into<String>) -> Self {
        Error::Geometry(msg.into())
    }

    pub(crate) fn range(what: &'static str, value: impl ToString, valid: impl ToString) -> Self {
        Error::Range {
            what,
            value: value.to_string(),
            valid: valid.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
