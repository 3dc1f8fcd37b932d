use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate box: {0}")]
    DegenerateBox(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimMismatch {
        expected: (usize, usize, usize),
        actual: (usize, usize, usize),
    },

    #[error("time {t} s outside scenario horizon [0, {horizon}] s")]
    OutsideHorizon { t: f64, horizon: f64 },

    #[error("prediction target {target_us} us precedes reference time {ref_us} us")]
    PredictIntoPast { target_us: u64, ref_us: u64 },

    #[error("cosine similarity undefined for a zero-norm feature")]
    ZeroNorm,

    #[error("not enough frames: need at least {needed}, got {got}")]
    TooFewFrames { needed: usize, got: usize },

    #[error("training diverged at epoch {epoch}: mean loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("packet decode failed: {0}")]
    Decode(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
