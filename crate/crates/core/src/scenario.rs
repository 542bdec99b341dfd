//! JSON scenario format.
//!
//! Parsing is strict: unknown keys are rejected and every problem is
//! reported with the JSON path where it was found.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::AgentDynamics;
use crate::error::{Error, Result};
use crate::graph::{min_required_k, AgentId, CommGraph, TaskGraph};
use crate::ppf::{ExpPpf, FunnelMargins};
use crate::stl::{NonTemporalFormula, Predicate, PredicateKind, TemporalFormula, TemporalOp, DEFAULT_ETA};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub agents: Vec<AgentSpec>,
    pub comm_edges: Vec<(usize, usize)>,
    #[serde(default)]
    pub tasks: Vec<TaskSpec>,
    pub observer: ObserverSpec,
    #[serde(default)]
    pub sim: SimSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub witness: Option<WitnessSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    pub id: usize,
    pub dynamics: AgentDynamics,
    pub initial_state: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum FormulaSpec {
    Always([f64; 2]),
    Eventually([f64; 2]),
    EventuallyAlways { outer: [f64; 2], inner: [f64; 2] },
}

impl FormulaSpec {
    pub fn op(&self) -> TemporalOp {
        match *self {
            FormulaSpec::Always([a, b]) => TemporalOp::Always { a, b },
            FormulaSpec::Eventually([a, b]) => TemporalOp::Eventually { a, b },
            FormulaSpec::EventuallyAlways { outer, inner } => TemporalOp::EventuallyAlways {
                a_outer: outer[0],
                b_outer: outer[1],
                a_inner: inner[0],
                b_inner: inner[1],
            },
        }
    }
}

fn default_components() -> Vec<usize> {
    vec![0, 1]
}

fn is_default_components(c: &[usize]) -> bool {
    c == [0, 1]
}

/// Radius given either directly or squared.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RadiusSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius_sq: Option<f64>,
}

impl RadiusSpec {
    fn resolve(&self) -> std::result::Result<f64, String> {
        match (self.radius, self.radius_sq) {
            (Some(r), None) if r > 0.0 => Ok(r),
            (None, Some(r2)) if r2 > 0.0 => Ok(r2.sqrt()),
            (Some(_), Some(_)) => Err("give either radius or radius_sq, not both".into()),
            (None, None) => Err("missing radius or radius_sq".into()),
            _ => Err("radius must be positive".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistanceSpec {
    pub agents: [usize; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius_sq: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<Vec<f64>>,
    #[serde(default = "default_components", skip_serializing_if = "is_default_components")]
    pub components: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReachSpec {
    pub agent: usize,
    pub center: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius_sq: Option<f64>,
    #[serde(default = "default_components", skip_serializing_if = "is_default_components")]
    pub components: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundSpec {
    pub agents: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius_sq: Option<f64>,
    #[serde(default = "default_components", skip_serializing_if = "is_default_components")]
    pub components: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineSpec {
    pub agents: Vec<usize>,
    pub a: Vec<f64>,
    pub b: f64,
    #[serde(default = "default_components", skip_serializing_if = "is_default_components")]
    pub components: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PredicateSpec {
    Distance(DistanceSpec),
    Reach(ReachSpec),
    Bound(BoundSpec),
    Affine(AffineSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum BodySpec {
    True,
    And(Vec<BodySpec>),
    Not(PredicateSpec),
    #[serde(untagged)]
    Pred(PredicateSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginSpec {
    pub ss: f64,
    pub win: f64,
    pub init: f64,
}

fn default_init_position() -> f64 {
    0.5
}

fn is_default_init_position(v: &f64) -> bool {
    *v == 0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub agent: usize,
    pub formula: FormulaSpec,
    pub body: BodySpec,
    pub rho_max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_star: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margins: Option<MarginSpec>,
    #[serde(default = "default_init_position", skip_serializing_if = "is_default_init_position")]
    pub init_position: f64,
}

impl TaskSpec {
    pub fn margins(&self) -> FunnelMargins {
        match self.margins {
            Some(m) => FunnelMargins {
                ss: m.ss,
                win: m.win,
                init: m.init,
            },
            None => FunnelMargins::defaults(self.rho_max),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HopSpec {
    Fixed(usize),
    Auto(AutoTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AutoTag {
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpfSpec {
    pub rho0: f64,
    pub rho_inf: f64,
    pub l: f64,
}

impl PpfSpec {
    pub fn to_ppf(self) -> Result<ExpPpf> {
        ExpPpf::new(self.rho0, self.rho_inf, self.l)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeltaOverride {
    pub estimator: usize,
    pub target: usize,
    pub delta: PpfSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShareSpec {
    pub target: usize,
    pub values: Vec<f64>,
}

fn default_init_fraction() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObserverSpec {
    pub k: HopSpec,
    pub default_delta: PpfSpec,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub deltas: Vec<DeltaOverride>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub shares: Vec<ShareSpec>,
    /// Initial disagreements are drawn in `±init_fraction·ρ(0)`.
    #[serde(default = "default_init_fraction")]
    pub init_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSpec {
    pub dt: f64,
    pub t_end: f64,
    pub seed: u64,
    pub eta: f64,
    pub w_max: f64,
    pub log_every: usize,
}

impl Default for SimSpec {
    fn default() -> Self {
        SimSpec {
            dt: 1e-3,
            t_end: 5.0,
            seed: 0,
            eta: DEFAULT_ETA,
            w_max: 0.0,
            log_every: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WitnessSpec {
    /// One full state per agent, in agent order.
    pub states: Vec<Vec<f64>>,
}

fn to_ids(v: &[usize]) -> Vec<AgentId> {
    v.iter().map(|&a| AgentId(a)).collect()
}

impl PredicateSpec {
    pub fn compile(&self) -> std::result::Result<Predicate, String> {
        let (kind, participants, components) = match self {
            PredicateSpec::Distance(d) => {
                let r = RadiusSpec {
                    radius: d.radius,
                    radius_sq: d.radius_sq,
                }
                .resolve()?;
                let off = d.offset.clone().unwrap_or_else(|| vec![0.0; d.components.len()]);
                (
                    PredicateKind::NormBallRelative { r, d: off },
                    to_ids(&d.agents),
                    d.components.clone(),
                )
            }
            PredicateSpec::Reach(s) => {
                let r = RadiusSpec {
                    radius: s.radius,
                    radius_sq: s.radius_sq,
                }
                .resolve()?;
                (
                    PredicateKind::NormBallAbsolute { r, c: s.center.clone() },
                    vec![AgentId(s.agent)],
                    s.components.clone(),
                )
            }
            PredicateSpec::Bound(s) => {
                let c_bar = RadiusSpec {
                    radius: s.radius,
                    radius_sq: s.radius_sq,
                }
                .resolve()?;
                (PredicateKind::Bound { c_bar }, to_ids(&s.agents), s.components.clone())
            }
            PredicateSpec::Affine(s) => (
                PredicateKind::Affine { a: s.a.clone(), b: s.b },
                to_ids(&s.agents),
                s.components.clone(),
            ),
        };
        Predicate::new(kind, participants, components).map_err(|e| e.to_string())
    }
}

impl BodySpec {
    pub fn compile(&self) -> std::result::Result<NonTemporalFormula, String> {
        Ok(match self {
            BodySpec::True => NonTemporalFormula::True,
            BodySpec::And(parts) => {
                NonTemporalFormula::And(parts.iter().map(BodySpec::compile).collect::<std::result::Result<_, _>>()?)
            }
            BodySpec::Not(p) => NonTemporalFormula::NotPred(p.compile()?),
            BodySpec::Pred(p) => NonTemporalFormula::Pred(p.compile()?),
        })
    }
}

impl TaskSpec {
    pub fn compile(&self) -> std::result::Result<TemporalFormula, String> {
        TemporalFormula::new(self.formula.op(), self.body.compile()?).map_err(|e| e.to_string())
    }
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let sc: Scenario = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Schema(vec![format!("{path}: {}", e.inner())])
        })?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn comm_graph(&self) -> Result<CommGraph> {
        CommGraph::new(self.n_agents(), self.comm_edges.iter().copied())
    }

    /// Task dependencies: `(owner, participant)` for every other participant,
    /// and a self-loop for tasks that involve only the owner.
    pub fn task_graph(&self) -> Result<TaskGraph> {
        let mut edges = Vec::new();
        for t in &self.tasks {
            let f = t.compile().map_err(Error::InvalidParameter)?;
            let others: Vec<AgentId> = f
                .body
                .participants()
                .into_iter()
                .filter(|&p| p != AgentId(t.agent))
                .collect();
            if others.is_empty() {
                edges.push((t.agent, t.agent));
            }
            edges.extend(others.into_iter().map(|p| (t.agent, p.0)));
        }
        TaskGraph::new(self.n_agents(), edges)
    }

    /// Structural and referential checks beyond the serde schema.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let n = self.n_agents();
        if n == 0 {
            errs.push("agents: at least one agent is required".to_string());
        }
        for (k, a) in self.agents.iter().enumerate() {
            if a.id != k + 1 {
                errs.push(format!("agents[{k}].id: expected {}, found {}", k + 1, a.id));
            }
            if let Err(e) = a.dynamics.validate() {
                errs.push(format!("agents[{k}].dynamics: {e}"));
            }
            if a.initial_state.len() != a.dynamics.state_dim() {
                errs.push(format!(
                    "agents[{k}].initial_state: expected {} components, found {}",
                    a.dynamics.state_dim(),
                    a.initial_state.len()
                ));
            }
        }
        let agent_ok = |a: usize| a >= 1 && a <= n;
        for (k, &(a, b)) in self.comm_edges.iter().enumerate() {
            if !agent_ok(a) || !agent_ok(b) || a == b {
                errs.push(format!("comm_edges[{k}]: invalid edge ({a}, {b})"));
            }
        }
        let mut owners = BTreeSet::new();
        for (k, t) in self.tasks.iter().enumerate() {
            if !agent_ok(t.agent) {
                errs.push(format!("tasks[{k}].agent: unknown agent {}", t.agent));
                continue;
            }
            if !owners.insert(t.agent) {
                errs.push(format!("tasks[{k}].agent: agent {} already has a task", t.agent));
            }
            if !(t.rho_max > 0.0) {
                errs.push(format!("tasks[{k}].rho_max: must be positive"));
            }
            if !(t.init_position > 0.0 && t.init_position <= 1.0) {
                errs.push(format!("tasks[{k}].init_position: must lie in (0, 1]"));
            }
            match t.compile() {
                Err(e) => errs.push(format!("tasks[{k}].body: {e}")),
                Ok(f) => {
                    for p in f.body.participants() {
                        if !agent_ok(p.0) {
                            errs.push(format!("tasks[{k}].body: unknown agent {p}"));
                            continue;
                        }
                        let dim = self.agents[p.idx()].dynamics.state_dim();
                        for lit in f.body.literals() {
                            if lit.predicate.participants.contains(&p)
                                && lit.predicate.components.iter().any(|&c| c >= dim)
                            {
                                errs.push(format!("tasks[{k}].body: component out of range for agent {p}"));
                            }
                        }
                    }
                    if let Err(e) = crate::stl::time_window(&f, t.t_star) {
                        errs.push(format!("tasks[{k}].t_star: {e}"));
                    }
                }
            }
        }
        let obs = &self.observer;
        if let Err(e) = obs.default_delta.to_ppf() {
            errs.push(format!("observer.default_delta: {e}"));
        }
        for (k, d) in obs.deltas.iter().enumerate() {
            if !agent_ok(d.estimator) || !agent_ok(d.target) {
                errs.push(format!("observer.deltas[{k}]: unknown agent"));
            }
            if let Err(e) = d.delta.to_ppf() {
                errs.push(format!("observer.deltas[{k}].delta: {e}"));
            } else if (d.delta.l - obs.default_delta.l).abs() > 1e-12 {
                errs.push(format!("observer.deltas[{k}].delta.l: must equal default_delta.l"));
            }
        }
        for (k, s) in obs.shares.iter().enumerate() {
            if !agent_ok(s.target) {
                errs.push(format!("observer.shares[{k}].target: unknown agent {}", s.target));
            }
        }
        if !(obs.init_fraction > 0.0 && obs.init_fraction < 1.0) {
            errs.push("observer.init_fraction: must lie in (0, 1)".to_string());
        }
        let sim = &self.sim;
        if !(sim.dt > 0.0) || !(sim.t_end > 0.0) || sim.log_every == 0 || !(sim.eta > 0.0) || !(sim.w_max >= 0.0) {
            errs.push("sim: dt, t_end, eta and log_every must be positive, w_max non-negative".to_string());
        }
        if let Some(w) = &self.witness {
            if w.states.len() != n {
                errs.push(format!("witness.states: expected {n} states, found {}", w.states.len()));
            }
        }
        if errs.is_empty() {
            if let HopSpec::Fixed(k) = obs.k {
                let need = min_required_k(&self.comm_graph()?, &self.task_graph()?);
                if k < 2 {
                    errs.push("observer.k: must be at least 2".to_string());
                } else if k < need {
                    errs.push(format!("observer.k: {k} is below the required {need}"));
                }
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Schema(errs))
        }
    }

    /// Hop count to use: the configured value or the smallest sufficient one.
    pub fn hop_count(&self) -> Result<usize> {
        Ok(match self.observer.k {
            HopSpec::Fixed(k) => k,
            HopSpec::Auto(_) => min_required_k(&self.comm_graph()?, &self.task_graph()?).max(2),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINI: &str = r#"{
        "agents": [
            {"id": 1, "dynamics": {"kind": "single-integrator", "dim": 2}, "initial_state": [0, 0]},
            {"id": 2, "dynamics": {"kind": "single-integrator", "dim": 2}, "initial_state": [1, 0]},
            {"id": 3, "dynamics": {"kind": "single-integrator", "dim": 2}, "initial_state": [2, 0]}
        ],
        "comm_edges": [[1, 2], [2, 3]],
        "tasks": [
            {"agent": 1, "formula": {"always": [4, 5]},
             "body": {"and": [{"distance": {"agents": [1, 3], "radius_sq": 9}}, "true"]},
             "rho_max": 7}
        ],
        "observer": {"k": "auto", "default_delta": {"rho0": 1, "rho_inf": 0.5, "l": 1}}
    }"#;

    #[test]
    fn parse_and_round_trip() {
        let sc = Scenario::from_json(MINI).unwrap();
        assert_eq!(sc.hop_count().unwrap(), 2);
        assert_eq!(sc.sim, SimSpec::default());
        let again = Scenario::from_json(&sc.to_json().unwrap()).unwrap();
        assert_eq!(sc, again);
        let gt = sc.task_graph().unwrap();
        assert_eq!(gt.task_neighbors(AgentId(1)), [AgentId(1), AgentId(3)].into_iter().collect());
    }

    #[test]
    fn unknown_key_reports_path() {
        let bad = MINI.replace("\"rho_max\": 7", "\"rho_max\": 7, \"colour\": 1");
        match Scenario::from_json(&bad) {
            Err(Error::Schema(v)) => assert!(v[0].starts_with("tasks[0]"), "{v:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_and_semantic_errors() {
        assert!(matches!(Scenario::from_json(""), Err(Error::Schema(_))));
        let bad = MINI.replace("\"k\": \"auto\"", "\"k\": 1");
        assert!(matches!(Scenario::from_json(&bad), Err(Error::Schema(_))));
        let bad = MINI.replace("[[1, 2], [2, 3]]", "[[1, 2], [2, 7]]");
        assert!(matches!(Scenario::from_json(&bad), Err(Error::Schema(_))));
        let bad = MINI.replace("\"radius_sq\": 9", "\"radius_sq\": 9, \"radius\": 3");
        assert!(matches!(Scenario::from_json(&bad), Err(Error::Schema(_))));
    }
}
