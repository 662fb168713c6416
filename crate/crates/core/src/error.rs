use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: parse error at line {line}, column {column}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid scenario: {0}")]
    Validation(String),

    #[error("bus {bus} hosts more than one {role}")]
    DuplicateEntity { bus: usize, role: &'static str },

    #[error("network is disconnected: buses {unreachable:?} cannot reach the slack bus")]
    Disconnected { unreachable: Vec<usize> },

    #[error("infeasible synthetic spec: {0}")]
    InfeasibleSpec(String),

    #[error("reduced network matrix is singular; dependent rows {rows:?}")]
    Singular { rows: Vec<String> },

    #[error("wake probability exhausted for appliance {appliance}: it must already be awake by slot {slot}")]
    CertaintyExhausted { appliance: String, slot: usize },

    #[error("appliance {appliance} has an empty feasible set: {reason}")]
    InfeasibleAppliance { appliance: String, reason: String },

    #[error("unknown or already awake appliance {appliance} at aggregator bus {bus}")]
    BadWakeEvent { bus: usize, appliance: String },

    #[error("local solve of {agent} did not converge: stationarity residual {residual:e}")]
    NoConvergence { agent: String, residual: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("brute-force grid too large: {points} points (limit 1e8)")]
    GridTooLarge { points: f64 },

    #[error("centralized problem infeasible: {0}")]
    Infeasible(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
