use thiserror::Error;

use crate::slab::BlockHandle;

/// Errors raised by profile arithmetic and replica sizing.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProfileError {
    #[error("invalid profile `{model}`: {reason}")]
    InvalidProfile { model: String, reason: String },

    #[error("model `{model}`: token size is not a whole number of bytes ({bits} bits)")]
    FractionalTokenSize { model: String, bits: u64 },

    #[error("model `{model}`: no profiled batch size reaches {rate} req/s (max {max_rate} req/s)")]
    InfeasibleRate {
        model: String,
        rate: f64,
        max_rate: f64,
    },

    #[error("model `{model}`: no batch size meets the TTFT SLO of {slo}s, even with replication")]
    InfeasibleSlo { model: String, slo: f64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SlabError {
    #[error("invalid slab pool config: {0}")]
    InvalidConfig(String),

    #[error("block-size key {0} is not registered with this pool")]
    InvalidKey(u64),

    #[error("pool exhausted: no partial slab for key {key} and no free slab")]
    PoolExhausted { key: u64 },

    #[error("invalid free of {0:?}")]
    InvalidFree(BlockHandle),

    #[error("payload of {payload} bytes exceeds block size {key}")]
    PayloadTooLarge { key: u64, payload: u64 },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlacementError {
    #[error("candidate `{model}` does not fit on group `{group}`")]
    InfeasibleCandidate { model: String, group: String },

    #[error("placement infeasible: model `{model}` fits on no GPU group")]
    PlacementInfeasible { model: String },

    #[error("unknown model `{0}` resident on a group")]
    UnknownModel(String),

    #[error(transparent)]
    Profile(#[from] ProfileError),
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("invalid measurement: {0}")]
    InvalidMeasurement(String),

    #[error("invariant violated: {0}")]
    InvariantViolated(String),

    #[error(transparent)]
    Slab(#[from] SlabError),

    #[error(transparent)]
    Profile(#[from] ProfileError),

    #[error(transparent)]
    Placement(#[from] PlacementError),
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Parse { path: String, message: String },

    #[error("{path}:{line}: {message}")]
    Line {
        path: String,
        line: usize,
        message: String,
    },

    #[error("invalid config: {0}")]
    Invalid(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
