use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("timestep {t} out of range for schedule of length {len}")]
    TimestepOutOfRange { t: usize, len: usize },

    #[error("degenerate timestep {0}: alpha_bar equals 1")]
    DegenerateTimestep(usize),

    #[error("invalid timestep ordering: t={t}, t_prev={t_prev}")]
    TimestepOrder { t: usize, t_prev: i64 },

    #[error("dimension {dim} not divisible by codec factor {factor}")]
    NotDivisible { dim: usize, factor: usize },

    #[error("mask_over_image decoding requires the original image")]
    MissingOriginal,

    #[error("gate length {got} does not match {expected} support tokens")]
    GateLength { expected: usize, got: usize },

    #[error("requested {requested} key/value pairs from a pool of {available}")]
    PoolTooSmall { requested: usize, available: usize },

    #[error("invalid fold spec: {0}")]
    InvalidFold(String),

    #[error("class {class} has {available} images, need at least {needed}")]
    InsufficientImages { class: usize, available: usize, needed: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite loss at iteration {iteration}: {value}")]
    NonFiniteLoss { iteration: usize, value: f64 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint manifest mismatch: {0}")]
    ManifestMismatch(String),

    #[error("image format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
