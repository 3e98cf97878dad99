use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{what} out of range: {value}")]
    Domain { what: &'static str, value: f64 },

    #[error("degenerate distance {distance:e} m between {between}")]
    DegenerateDistance {
        distance: f64,
        between: &'static str,
    },

    #[error("not a point on the probability simplex: {0}")]
    Simplex(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("{what}: expected dimension {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("gradient tape does not belong to the current network parameters")]
    StaleTape,

    #[error("network architectures differ: {0}")]
    Architecture(String),

    #[error("total power must be positive, got {0} W")]
    ZeroPower(f64),

    #[error("environment has not been reset")]
    NotReset,

    #[error("combinatorial budget exceeded: {requested} evaluations requested, limit {limit}")]
    Budget { requested: u128, limit: u128 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("configuration key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. })
    }
}
