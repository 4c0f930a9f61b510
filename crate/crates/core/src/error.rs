use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("degenerate timestamp {t}: alpha_bar equals 1")]
    DegenerateTimestamp { t: usize },
    #[error("schedule inconsistency at t={t}, t_prev={t_prev}: residual variance {value} is negative")]
    ScheduleInconsistency { t: usize, t_prev: usize, value: f64 },
    #[error("encoding error for prompt {prompt:?}: {reason}")]
    Encoding { prompt: String, reason: String },
    #[error("numerical divergence: {0}")]
    Divergence(String),
    #[error("degenerate depth at frame {frame}, joint {joint}: z = {depth}")]
    DegenerateDepth { frame: usize, joint: usize, depth: f64 },
    #[error("alignment error at frame {frame}: {reason}")]
    Alignment { frame: usize, reason: String },
    #[error("unsupported op `{0}`")]
    UnsupportedOp(String),
    #[error("load error: {0}")]
    Load(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
