use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("address {address} was previously assigned family {existing}, now {requested}")]
    AddressFamilyMismatch {
        address: String,
        existing: String,
        requested: String,
    },

    #[error("invalid {family} parameters: {reason}")]
    InvalidParameter { family: &'static str, reason: String },

    #[error("expected {expected} proposal parameters, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("value {value} has the wrong kind for a {family} distribution")]
    ValueKind { family: &'static str, value: String },

    #[error("unknown distribution family `{0}`")]
    UnknownFamily(String),

    #[error("predict name `{0}` was already set in this trace")]
    DuplicatePredictName(String),

    #[error("rejection scope stack underflow")]
    ScopeUnderflow,

    #[error("rejection scope `{0}` opened inside itself")]
    NestedScopeReuse(String),

    #[error("model exited with {0} rejection scope(s) still open")]
    UnclosedScope(usize),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("observation has {len} values but the model consumed index {index}")]
    ObservationExhausted { index: usize, len: usize },

    #[error("model error after {address}: {source}")]
    Model {
        address: String,
        #[source]
        source: Box<Error>,
    },

    #[error("every particle has zero weight (first zero-likelihood observe: {first_zero_observe})")]
    AllWeightsZero { first_zero_observe: String },

    #[error("predict `{0}` missing from at least one trace")]
    MissingPredict(String),

    #[error("no inference-network head for address `{0}`")]
    UnknownHead(String),

    #[error("non-finite loss at training step {step}")]
    NonFiniteLoss { step: usize },

    #[error("unsupported network file version {found} (expected {expected})")]
    VersionMismatch { found: u64, expected: u64 },

    #[error("malformed file: {0}")]
    MalformedFile(String),

    #[error("malformed trace on line {line}: {reason}")]
    MalformedTrace { line: usize, reason: String },

    #[error("unknown or unsupported model `{0}`")]
    UnsupportedModel(String),

    #[error("invalid model configuration: {0}")]
    ConfigInvalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Innermost error, looking through `Model` wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Model { source, .. } => source.root(),
            other => other,
        }
    }
}
