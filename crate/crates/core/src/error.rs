use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot normalize a vector with norm {0:e}")]
    ZeroVector(f64),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),

    #[error("anchor row {row} has no valid positive")]
    NoValidPositive { row: usize },

    #[error("anchor row {row} has an empty batch-negative pool")]
    EmptyNegativePool { row: usize },

    #[error("positive prototype of row {row} has vanishing norm")]
    DegeneratePrototype { row: usize },

    #[error("oracle labels are required for this loss variant")]
    MissingOracle,

    #[error("forward cache does not match the current parameters")]
    StaleCache,

    #[error("schedule needs total_steps ({total}) > warmup_steps ({warmup})")]
    InvalidSchedule { total: usize, warmup: usize },

    #[error("non-finite gradient in parameter block `{block}`")]
    NonFiniteGradient { block: &'static str },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("training diverged at step {step}: {cause}")]
    Diverged { step: usize, cause: String },

    #[error("no margin records")]
    EmptyRecords,

    #[error("series is constant; correlation undefined")]
    ConstantSeries,

    #[error("invalid areas: part {part}, object {object}")]
    BadAreas { part: f64, object: f64 },

    #[error("no group has a defined correlation")]
    NoValidGroups,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("split `{0}` has no identities")]
    MissingSplit(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
