use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward already run on this tape")]
    TapeReplay,

    #[error("backward on an empty tape")]
    EmptyTape,

    #[error("invalid network at layer {layer}: {msg}")]
    InvalidGraph { layer: usize, msg: String },

    #[error("invalid bounds: lower {lower} exceeds upper {upper}")]
    InvalidBounds { lower: f64, upper: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("projected bounds require ReLU-only activations; layer {layer} is {kind}")]
    UnsupportedProjection { layer: usize, kind: String },

    #[error("no feasible tail epsilon below 1 for target failure probability {requested:.3e}; minimum achievable is {achievable:.3e}")]
    InfeasibleTailPlan { requested: f64, achievable: f64 },

    #[error("tail plan requires {needed} projections per estimate, budget is {budget}")]
    TailBudgetExceeded { needed: usize, budget: usize },

    #[error("training diverged at epoch {epoch}: {msg}")]
    Diverged { epoch: usize, msg: String },

    #[error("model format error: {0}")]
    ModelFormat(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
