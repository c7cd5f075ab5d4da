use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("pitch {0} outside the supported range 25.85..=103.95")]
    PitchOutOfRange(f64),

    #[error("training diverged: {0}")]
    NonFiniteLoss(String),

    #[error("corpus too small: {0}")]
    CorpusTooSmall(String),

    #[error("unknown instrument `{0}`")]
    UnknownInstrument(String),

    #[error("missing model for stage {0}")]
    MissingModel(&'static str),

    #[error("feature layout mismatch for {model}: file has `{found}`, expected `{expected}`")]
    LayoutMismatch {
        model: String,
        found: String,
        expected: String,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("midi: {0}")]
    Midi(String),

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),

    #[error("resampling failed: {0}")]
    Resample(String),

    #[error("stage {stage} failed: {reason}")]
    Stage { stage: String, reason: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
