use thiserror::Error;

/// Errors raised by the distillation primitives.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum OpdError {
    #[error("invalid log-probability {value} (must be finite or -inf)")]
    InvalidLogprob { value: f64 },

    #[error("degenerate trajectory: {0}")]
    DegenerateTrajectory(String),

    #[error("margin undefined: {side} outcome set is empty")]
    MarginUndefined { side: &'static str },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("token {token} is outside the vocabulary of size {vocab_size}")]
    OutOfVocabulary { token: u32, vocab_size: usize },

    #[error("no teacher routed for domain `{domain}` (known domains: {known:?})")]
    Routing { domain: String, known: Vec<String> },

    #[error("verifier failed on prompt `{prompt_id}`: {reason}")]
    Profiling { prompt_id: String, reason: String },

    #[error("prompt `{0}` carries no target answer")]
    MissingTarget(String),

    #[error("enumeration needs up to {required} trajectories, budget is {budget}")]
    OracleScale { required: u128, budget: u128 },

    #[error("pass@k requires k <= n (k = {k}, n = {n})")]
    PassAtK { k: usize, n: usize },

    #[error("malformed record: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, OpdError>;
