//! Decentralized k-hop prescribed-performance observers and STL funnel
//! control for heterogeneous multi-agent systems.
//!
//! The crate is organised bottom-up:
//!
//! * [`graph`]: communication/task graphs, k-hop sets, induced matrices, clusters
//! * [`stl`]: the STL fragment, robust semantics and an offline monitor
//! * [`ppf`]: prescribed performance functions and funnel design
//! * [`observer`]: the k-hop state observer with audited locality
//! * [`controller`]: task errors and the funnel feedback law
//! * [`dynamics`] and [`sim`]: plant models and the synchronous simulation loop
//! * [`scenario`]: the JSON scenario format

// `!(x > 0.0)` is used on purpose so that NaN fails parameter checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod controller;
pub mod dynamics;
pub mod error;
pub mod graph;
pub mod observer;
pub mod ppf;
pub mod scenario;
pub mod sim;
pub mod stl;

pub use error::{Error, FunnelConstraint, Result};
pub use graph::{
    check_assumptions, cluster_decomposition, induced_matrices, k_hop_neighbors,
    min_eigenvalue_check, min_required_k, AgentId, AssumptionReport, ClusterDecomposition,
    CommGraph, InducedMatrices, KHopNeighborhood, TaskGraph,
};
pub use controller::{control_input, task_error, validate_rho_max, CompiledTask, TaskError};
pub use dynamics::AgentDynamics;
pub use observer::{LocalityAudit, ObserverBank};
pub use ppf::{build_task_funnel, design_observer_funnels, feasibility_report, ExpPpf, FeasibilityReport, TaskFunnel};
pub use scenario::Scenario;
pub use sim::{
    monitor_tasks, read_trajectory_csv, run_simulation, satisfaction_report, write_outputs, MonitorReport,
    RunOptions, SatisfactionReport, Setup, Trajectory,
};
pub use stl::{monitor_trajectory, smooth_min, NonTemporalFormula, Predicate, TemporalFormula};
