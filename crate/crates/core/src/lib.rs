//! Criticality-aware planning and packing of containerized applications onto
//! a degraded cluster.
//!
//! The pipeline: [`planner`] turns per-microservice criticality tags and an
//! operator objective into a global activation plan sized to the surviving
//! capacity; [`scheduler`] packs that plan onto healthy servers with minimal
//! churn. [`baselines`] holds the comparison schemes, [`oracle`] an exact
//! solver for small instances, [`workload`] synthetic inputs and [`sim`] the
//! failure-injection harness.

pub mod baselines;
pub mod error;
pub mod model;
pub mod oracle;
pub mod par;
pub mod planner;
pub mod scheduler;
pub mod sim;
pub mod workload;

pub use error::{Error, Result, StateViolation, ValidationError};
pub use model::{
    AppSpec, Application, CallGraph, ClusterState, Criticality, DependencyGraph, Microservice, Placement, ReplicaKey,
    ServerNode,
};
pub use planner::{
    compute_water_fill, global_rank, plan, priority_estimator, ActivationPlan, AppRank, FairShares, Objective,
    OperatorObjective, PlannerOptions,
};
pub use scheduler::{schedule, Action, ActionKind, PackingOutcome, SchedulerOptions};
