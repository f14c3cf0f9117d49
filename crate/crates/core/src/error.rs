use std::path::PathBuf;

/// Every failure the library can report.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("variable does not belong to the active graph")]
    NoGraph,
    #[error("graph has already been consumed by a backward pass")]
    DoubleBackward,
    #[error("finite-difference step must be non-zero")]
    StepSizeZero,
    #[error("parameter {0} has no gradient")]
    MissingGrad(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("model was built without dropout")]
    DropoutDisabled,

    #[error("{path}: bad IDX magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { path: PathBuf, found: u32, expected: u32 },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("{0}: truncated file")]
    TruncatedFile(PathBuf),
    #[error("invalid generator parameters: {0}")]
    InvalidParams(String),
    #[error("dataset too small to split ({0} items)")]
    TooSmall(usize),
    #[error("requested {requested} items but only {available} are available")]
    CountTooLarge { requested: usize, available: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("labeled pool is empty")]
    EmptyPool,

    #[error("probability row {row} is not a distribution (sum {sum})")]
    NotDistribution { row: usize, sum: f64 },
    #[error("budget {requested} exceeds the {available} available items")]
    BudgetTooLarge { requested: usize, available: usize },
    #[error("embedding dimensions differ: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("cannot estimate a density from no values")]
    EmptyInput,

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("zero variance: correlation is undefined")]
    ZeroVariance,
    #[error("all paired differences are zero")]
    AllZeroDifferences,
    #[error("missing dump: {0}")]
    MissingDump(String),

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("{0}")]
    Parse(String),
    #[error("schema error in field `{field}`: {message}")]
    Schema { field: String, message: String },
    #[error("unknown acquisition function `{name}` (valid: {valid})")]
    UnknownAcquisition { name: String, valid: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Errors caused by the user's configuration rather than by running it.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::ConfigInvalid(_)
                | Error::Parse(_)
                | Error::Schema { .. }
                | Error::UnknownAcquisition { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
