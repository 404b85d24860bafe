use thiserror::Error;

/// Errors raised across the solver suite.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("infeasible scenario: {0}")]
    Infeasible(String),

    #[error("market coefficient singularity: {0}")]
    Singularity(String),

    #[error("non-finite value at step {step}: {what}")]
    NonFinite { step: usize, what: String },

    #[error("singular volatility matrix at step {step} (condition estimate {cond:.3e})")]
    SingularSigma { step: usize, cond: f64 },

    #[error("strategy of investor {investor} at step {step} leaves the simplex (deviation {deviation:.3e})")]
    Admissibility {
        investor: usize,
        step: usize,
        deviation: f64,
    },

    #[error("memory budget exceeded: {required} values requested, budget {budget}")]
    MemoryBudget { required: usize, budget: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
