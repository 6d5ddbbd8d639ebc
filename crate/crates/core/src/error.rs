use thiserror::Error;

/// Unified error type for the whole crate. The CLI maps variants onto
/// distinct process exit codes, so keep the classes coarse and stable.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: lhs {lhs:?}, rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("tape error: {0}")]
    Tape(String),

    #[error("numeric error in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("config mismatch on field `{field}`: checkpoint has {found}, model has {expected}")]
    ConfigMismatch {
        field: String,
        expected: String,
        found: String,
    },

    #[error("freeze violation: {0}")]
    FreezeViolation(String),

    #[error("infeasible budget: {requested}; available submodels: {available}")]
    InfeasibleBudget { requested: String, available: String },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
