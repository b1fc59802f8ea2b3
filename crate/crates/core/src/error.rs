use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("cache underrun: query at position {query_position} has no visible keys")]
    CacheUnderrun { query_position: usize },
    #[error("index out of range: {0}")]
    Index(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("cache inconsistency: {0}")]
    Cache(String),
    #[error("capacity error: requested {requested} of {available} active tokens")]
    Capacity { requested: usize, available: usize },
    #[error("kv mode violation: {0}")]
    Mode(String),
    #[error("out-of-order position {position} (last stored {last})")]
    Ordering { position: usize, last: usize },
    #[error("value {0} outside [0, 1]")]
    Domain(f64),
    #[error("posterior undefined at {0}: both component densities are zero")]
    UndefinedPosterior(f64),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("mapping error: {0}")]
    Mapping(String),
    #[error("replay error: {0}")]
    Replay(String),
    #[error("length error: {0}")]
    Length(String),
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("init error: {0}")]
    Init(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 for user/config errors, 3 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite(_) => 3,
            _ => 2,
        }
    }
}
