use thiserror::Error;

/// Structural problems found while building or loading a workload or cluster.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ValidationError {
    #[error("duplicate application id `{0}`")]
    DuplicateApp(String),
    #[error("application `{app}`: duplicate microservice id `{ms}`")]
    DuplicateMicroservice { app: String, ms: String },
    #[error("application `{app}`: microservice `{ms}` has invalid demand {demand}")]
    InvalidDemand { app: String, ms: String, demand: f64 },
    #[error("application `{app}`: microservice `{ms}` has zero replicas")]
    ZeroReplicas { app: String, ms: String },
    #[error("application `{app}`: microservice `{ms}` has criticality tag 0 (tags start at 1)")]
    ZeroTag { app: String, ms: String },
    #[error("application `{app}` has invalid price {price}")]
    InvalidPrice { app: String, price: f64 },
    #[error("application `{app}`: edge {caller} -> {callee} names unknown microservice `{missing}`")]
    DanglingEdge {
        app: String,
        caller: String,
        callee: String,
        missing: String,
    },
    #[error("application `{app}`: dependency cycle {}", .cycle.join(" -> "))]
    Cycle { app: String, cycle: Vec<String> },
    #[error("application `{app}`: call graph #{index} {reason}")]
    InvalidCallGraph { app: String, index: usize, reason: String },
    #[error("duplicate server id `{0}`")]
    DuplicateServer(String),
    #[error("server `{server}` has invalid capacity {capacity}")]
    InvalidCapacity { server: String, capacity: f64 },
}

/// A broken cluster-state invariant.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum StateViolation {
    #[error("unknown server index {0}")]
    UnknownServer(usize),
    #[error("unknown server `{0}`")]
    UnknownServerId(String),
    #[error("server `{0}` is not healthy")]
    UnhealthyServer(String),
    #[error("server `{server}` over capacity: used {used} > capacity {capacity}")]
    OverCapacity { server: String, used: f64, capacity: f64 },
    #[error("replica {0} is already assigned")]
    AlreadyAssigned(String),
    #[error("replica {0} refers to an unknown application or microservice")]
    UnknownReplica(String),
    #[error("replica {key} demand {recorded} does not match expected {expected}")]
    DemandMismatch { key: String, recorded: f64, expected: f64 },
    #[error("cached usage of server `{server}` is {cached}, recomputed {actual}")]
    UsageDrift { server: String, cached: f64, actual: f64 },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("validation error: {0}")]
    Validation(#[from] ValidationError),
    #[error("state violation: {0}")]
    State(#[from] StateViolation),
    #[error("budget exceeded: {0}")]
    BudgetExceeded(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
