use std::fmt;

use thiserror::Error;

use crate::graph::AgentId;

/// Constraint that prevented a task funnel from being constructed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FunnelConstraint {
    /// The estimation penalty consumes the whole robustness budget inside the window.
    PenaltyVsRhoMax,
    /// The steady-state value cannot sit below the window cap.
    SteadyStateVsWindow,
    /// The window starts at t = 0 and the initial funnel width already exceeds the cap.
    InitializationVsWindow,
    /// The initial estimated robustness is not below the upper reference.
    InitialRobustnessAboveMax,
    /// Gamma minus the penalty dips to zero or below somewhere on the horizon.
    PositiveWidth,
}

impl fmt::Display for FunnelConstraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FunnelConstraint::PenaltyVsRhoMax => "penalty-vs-rho-max",
            FunnelConstraint::SteadyStateVsWindow => "steady-state-vs-window",
            FunnelConstraint::InitializationVsWindow => "initialization-vs-window",
            FunnelConstraint::InitialRobustnessAboveMax => "initial-robustness-above-max",
            FunnelConstraint::PositiveWidth => "positive-width",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("agent {0} has an empty k-hop neighborhood")]
    EmptyNeighborhood(AgentId),

    #[error("assumption violated: {0}")]
    AssumptionViolation(String),

    #[error("infeasible relaxation: {0}")]
    InfeasibleRelaxation(String),

    #[error("infeasible funnel ({binding}): {detail}")]
    InfeasibleFunnel {
        binding: FunnelConstraint,
        detail: String,
    },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("locality breach: agent {reader} read {item} from agent {source_agent}")]
    LocalityBreach {
        reader: AgentId,
        source_agent: AgentId,
        item: String,
    },

    #[error("scenario schema errors:\n  {}", .0.join("\n  "))]
    Schema(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
