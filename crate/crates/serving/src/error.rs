use opd_core::OpdError;

#[derive(Debug, thiserror::Error)]
pub enum ServingError {
    #[error("no route for domain `{domain}` (known domains: {})", known.join(", "))]
    Routing { domain: String, known: Vec<String> },
    #[error("teacher `{0}` has an empty endpoint pool")]
    EmptyPool(String),
    #[error("invalid routing table: {0}")]
    Config(String),
    #[error("all {attempts} endpoints of teacher `{teacher}` failed; last error: {last_error}")]
    EnsembleUnavailable {
        teacher: String,
        attempts: usize,
        last_error: String,
    },
    #[error("request to {endpoint} rejected with status {status}: {message}")]
    Request {
        endpoint: String,
        status: u16,
        message: String,
    },
    #[error("malformed response from {endpoint}: {message}")]
    Response { endpoint: String, message: String },
    #[error("cannot bind {address}: {message}")]
    Bind { address: String, message: String },
    #[error(transparent)]
    Core(#[from] OpdError),
}

pub type Result<T> = std::result::Result<T, ServingError>;
