//! Scenario setup and the synchronous simulation loop.
//!
//! Plants and observers form one coupled ODE integrated with classical RK4.
//! At every stage all agents exchange a fresh snapshot: task owners first
//! publish their drives, then every agent reads the drives of its
//! neighbours and computes its input. The disturbance is held constant
//! across the stages of one step.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::controller::{task_drive, validate_rho_max, CompiledTask, RhoMaxReport, TaskDrive};
use crate::dynamics::{sample_disturbance, AgentDynamics};
use crate::error::{Error, Result};
use crate::graph::{
    check_assumptions, cluster_decomposition, min_required_k, AgentId, AssumptionReport, ClusterDecomposition,
    CommGraph, TaskGraph,
};
use crate::observer::{
    disagreement, observer_derivative, Disagreement, DriveShare, ExchangeView, LocalityAudit, ObserverBank, Snapshot,
};
use crate::ppf::{
    build_task_funnel, feasibility_report, ppf_norm, rho_t_affine, rho_t_normball, ExpPpf, FeasibilityInput,
    FeasibilityReport, Penalty, PerformanceFunction,
};
use crate::scenario::Scenario;
use crate::stl::{
    monitor_trajectory, robustness, smooth_min, time_window, Literal, PredicateKind, RobustnessMode,
    SampledTrajectory, TemporalFormula,
};

/// Stream of the seeded generator used for estimate initialization.
const INIT_STREAM: u64 = 1;
/// Stream used for disturbances.
const DISTURBANCE_STREAM: u64 = 2;
/// Stored events are capped; counts are always exact.
const MAX_STORED_EVENTS: usize = 10_000;

/// Classical fourth-order Runge–Kutta step for `ẏ = f(t, y)`.
pub fn rk4_step<F>(y: &[f64], t: f64, dt: f64, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    let axpy = |k: &[f64], h: f64| -> Vec<f64> { y.iter().zip(k).map(|(a, b)| a + h * b).collect() };
    let k1 = f(t, y)?;
    let k2 = f(t + dt / 2.0, &axpy(&k1, dt / 2.0))?;
    let k3 = f(t + dt / 2.0, &axpy(&k2, dt / 2.0))?;
    let k4 = f(t + dt, &axpy(&k3, dt))?;
    Ok((0..y.len())
        .map(|i| y[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect())
}

fn map_indexed<T, F>(n: usize, parallel: bool, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    if parallel {
        (0..n).into_par_iter().map(f).collect()
    } else {
        (0..n).map(f).collect()
    }
}

/// Everything derived from a scenario before the first step.
#[derive(Debug, Clone)]
pub struct Setup {
    pub scenario: Scenario,
    pub seed: u64,
    pub gc: CommGraph,
    pub gt: TaskGraph,
    pub decomposition: ClusterDecomposition,
    pub assumptions: AssumptionReport,
    pub k: usize,
    pub min_k: usize,
    pub dynamics: Vec<AgentDynamics>,
    pub x0: Vec<Vec<f64>>,
    /// Observer bank of each target, with initialized estimates.
    pub banks: Vec<Option<ObserverBank>>,
    /// Tasks whose funnels could all be built.
    pub tasks: Vec<CompiledTask>,
    pub feasibility: FeasibilityReport,
    pub rho_max: Vec<RhoMaxReport>,
    /// Per agent: owners of tasks in which it is a communicating participant.
    pub drive_owners: Vec<Vec<AgentId>>,
}

fn delta_for(sc: &Scenario, estimator: AgentId, target: AgentId) -> Result<ExpPpf> {
    sc.observer
        .deltas
        .iter()
        .find(|d| d.estimator == estimator.0 && d.target == target.0)
        .map_or(sc.observer.default_delta, |d| d.delta)
        .to_ppf()
}

/// Worst-case loss of one literal caused by the owner's estimation errors.
fn literal_penalty(lit: &Literal, owner: AgentId, banks: &[Option<ObserverBank>], estimated: &[AgentId]) -> Result<Penalty> {
    let mut pen = Penalty::zero();
    let p = &lit.predicate;
    let nc = p.components.len();
    for (pi, &a) in p.participants.iter().enumerate() {
        if estimated.binary_search(&a).is_err() {
            continue;
        }
        let bank = banks[a.idx()]
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter(format!("no observer of agent {a}")))?;
        let row = bank
            .nbh
            .position(owner)
            .ok_or_else(|| Error::InvalidParameter(format!("agent {owner} holds no estimate of {a}")))?;
        let dn = ppf_norm(&vec![bank.funnels.deltas[row]; nc])?;
        let term = match &p.kind {
            PredicateKind::NormBallRelative { r, .. } | PredicateKind::NormBallAbsolute { r, .. } => {
                if lit.negated {
                    return Err(Error::InfeasibleRelaxation(format!(
                        "negated norm-ball literal of task {owner} has estimated participant {a}"
                    )));
                }
                rho_t_normball(a, dn, *r)?
            }
            PredicateKind::Bound { c_bar } => {
                if lit.negated {
                    return Err(Error::InfeasibleRelaxation(format!(
                        "negated bound literal of task {owner} has estimated participant {a}"
                    )));
                }
                rho_t_normball(a, dn, *c_bar)?
            }
            PredicateKind::Affine { a: coef, .. } => {
                let gain = coef[pi * nc..(pi + 1) * nc].iter().map(|v| v * v).sum::<f64>().sqrt();
                rho_t_affine(a, dn, gain)
            }
        };
        pen.add(term);
    }
    Ok(pen)
}

impl Setup {
    /// Build graphs, observers and task funnels. `seed` overrides the scenario seed.
    pub fn new(scenario: Scenario, seed: Option<u64>) -> Result<Self> {
        scenario.validate()?;
        let seed = seed.unwrap_or(scenario.sim.seed);
        let gc = scenario.comm_graph()?;
        let gt = scenario.task_graph()?;
        let decomposition = cluster_decomposition(&gc, &gt)?;
        let assumptions = check_assumptions(&gc, &gt, &decomposition);
        if !assumptions.all_pass() {
            return Err(Error::AssumptionViolation(format!(
                "graph assumptions fail: {}",
                serde_json::to_string(&assumptions)?
            )));
        }
        let min_k = min_required_k(&gc, &gt);
        let k = scenario.hop_count()?;
        let n = scenario.n_agents();
        let dynamics: Vec<AgentDynamics> = scenario.agents.iter().map(|a| a.dynamics.clone()).collect();
        let x0: Vec<Vec<f64>> = scenario.agents.iter().map(|a| a.initial_state.clone()).collect();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(INIT_STREAM);
        let mut banks = Vec::with_capacity(n);
        for target in gc.agents() {
            let nbh = crate::graph::k_hop_neighbors(&gc, target, k)?;
            let deltas = nbh
                .members
                .iter()
                .map(|&j| delta_for(&scenario, j, target))
                .collect::<Result<Vec<_>>>()?;
            let shares = scenario.observer.shares.iter().find(|s| s.target == target.0);
            let bank = ObserverBank::new(
                &gc,
                target,
                k,
                dynamics[target.idx()].state_dim(),
                &deltas,
                shares.map(|s| s.values.as_slice()),
            )?;
            let bank = match bank {
                Some(mut b) => {
                    b.initialize(&x0[target.idx()], scenario.observer.init_fraction, &mut rng)?;
                    Some(b)
                }
                None => None,
            };
            banks.push(bank);
        }

        let eta = scenario.sim.eta;
        let mut inputs = Vec::new();
        let mut tasks = Vec::new();
        let mut rho_max = Vec::new();
        let mut drive_owners = vec![Vec::new(); n];
        for spec in &scenario.tasks {
            let owner = AgentId(spec.agent);
            let formula = spec.compile().map_err(Error::InvalidParameter)?;
            let literals = formula.body.literals();
            if literals.is_empty() {
                continue;
            }
            let closed = gc.closed_neighbors(owner);
            let (known, estimated): (Vec<AgentId>, Vec<AgentId>) =
                formula.body.participants().into_iter().partition(|p| closed.contains(p));
            for &p in &estimated {
                let holds = banks[p.idx()].as_ref().is_some_and(|b| b.nbh.position(owner).is_some());
                if !holds {
                    return Err(Error::InvalidParameter(format!(
                        "agent {owner} holds no estimate of task participant {p}; k = {k} is too small"
                    )));
                }
            }
            let window = time_window(&formula, spec.t_star)?;
            let mixed = |a: AgentId| -> &[f64] {
                if estimated.contains(&a) {
                    let b = banks[a.idx()].as_ref().expect("checked above");
                    &b.estimates[b.nbh.position(owner).expect("checked above")]
                } else {
                    &x0[a.idx()]
                }
            };
            let values = literals
                .iter()
                .map(|l| l.eval(mixed).map(|(v, _)| v))
                .collect::<Result<Vec<f64>>>()?;
            let (rho0, _) = smooth_min(&values, eta);
            // Equal initial widths make Γ̄(0) = Γ_j(0) − ln(z)/η; shifting the
            // reference keeps e(0) at −init_position for the conjunction.
            let z = literals.len() as f64;
            let init_eff = rho0 - spec.init_position * z.ln() / eta;
            let mut funnels = Vec::new();
            for (j, lit) in literals.iter().enumerate() {
                let penalty = literal_penalty(lit, owner, &banks, &estimated)?;
                let funnel = build_task_funnel(
                    penalty.clone(),
                    spec.rho_max,
                    init_eff,
                    window,
                    spec.margins(),
                    spec.init_position,
                );
                let witness_robustness = match &scenario.witness {
                    Some(w) => Some(lit.eval(|a: AgentId| w.states[a.idx()].as_slice())?.0),
                    None => None,
                };
                if let Ok(f) = &funnel {
                    funnels.push(f.clone());
                }
                inputs.push(FeasibilityInput {
                    task: owner,
                    conjunct: j,
                    rho_max: spec.rho_max,
                    window,
                    penalty,
                    funnel: funnel.map_err(|e| e.to_string()),
                    witness_robustness,
                });
            }
            let task = CompiledTask {
                owner,
                formula,
                literals,
                rho_max: spec.rho_max,
                eta,
                known,
                estimated,
                funnels,
            };
            let witness = scenario
                .witness
                .as_ref()
                .map(|w| move |a: AgentId| w.states[a.idx()].as_slice());
            rho_max.push(validate_rho_max(&task, witness)?);
            if task.funnels.len() == task.literals.len() {
                for &p in &task.known {
                    drive_owners[p.idx()].push(owner);
                }
                tasks.push(task);
            }
        }
        for d in &mut drive_owners {
            d.sort();
        }
        let feasibility = feasibility_report(&inputs);
        log::debug!(
            "k = {k}, {} observer banks, {} controlled tasks, feasible = {}",
            banks.iter().flatten().count(),
            tasks.len(),
            feasibility.feasible
        );
        Ok(Setup {
            scenario,
            seed,
            gc,
            gt,
            decomposition,
            assumptions,
            k,
            min_k,
            dynamics,
            x0,
            banks,
            tasks,
            feasibility,
            rho_max,
            drive_owners,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.dynamics.len()
    }

    /// Feasible funnels and `ρ^max` below every known optimum.
    pub fn is_feasible(&self) -> bool {
        self.feasibility.feasible && self.rho_max.iter().all(|r| r.pass != Some(false))
    }

    /// Violations of the initial funnel conditions: every task error inside
    /// `(−1, 0)` and every disagreement inside its funnel at `t = 0`.
    pub fn initialization_check(&self) -> Result<Vec<String>> {
        let state = self.initial_state();
        let mut out = Vec::new();
        let audit = LocalityAudit::new();
        let snap = state.snapshot(&[]);
        let empty = vec![Vec::new(); self.n_agents()];
        let snap = Snapshot { drives: &empty, ..snap };
        for task in &self.tasks {
            let view = ExchangeView::new(task.owner, &self.gc, snap, &audit);
            let d = task_drive(task, &view, 0.0)?;
            let gap = d.value.rho_bar - task.rho_max;
            if !(d.value.gamma_bar > 0.0 && gap < 0.0 && gap > -d.value.gamma_bar) {
                out.push(format!(
                    "task {}: rho_hat - rho_max = {gap} outside (-{}, 0)",
                    task.owner, d.value.gamma_bar
                ));
            }
        }
        for bank in self.banks.iter().flatten() {
            let dis = disagreement(bank, &self.gc, snap, &audit, 0.0)?;
            for (row, xi) in dis.xi.iter().enumerate() {
                let rho = bank.rho(row, 0.0);
                if xi.iter().any(|v| !(v.abs() < rho)) {
                    out.push(format!(
                        "observer of {} at {}: disagreement outside rho(0) = {rho}",
                        bank.target, bank.nbh.members[row]
                    ));
                }
            }
        }
        Ok(out)
    }

    fn initial_state(&self) -> AgentsState {
        AgentsState {
            x: self.x0.clone(),
            est: self.banks.iter().map(|b| b.as_ref().map_or_else(Vec::new, |b| b.estimates.clone())).collect(),
            members: self
                .banks
                .iter()
                .map(|b| b.as_ref().map_or_else(Vec::new, |b| b.nbh.members.clone()))
                .collect(),
        }
    }

    fn layout(&self) -> Layout {
        let mut off = 0;
        let mut x = Vec::new();
        for d in &self.dynamics {
            x.push((off, d.state_dim()));
            off += d.state_dim();
        }
        let mut est = Vec::new();
        for b in &self.banks {
            est.push(b.as_ref().map(|b| {
                let s = (off, b.rows(), b.dim);
                off += b.rows() * b.dim;
                s
            }));
        }
        Layout { x, est, len: off }
    }
}

#[derive(Debug, Clone)]
struct AgentsState {
    x: Vec<Vec<f64>>,
    est: Vec<Vec<Vec<f64>>>,
    members: Vec<Vec<AgentId>>,
}

impl AgentsState {
    fn snapshot<'a>(&'a self, drives: &'a [Vec<DriveShare>]) -> Snapshot<'a> {
        Snapshot {
            states: &self.x,
            estimates: &self.est,
            members: &self.members,
            drives,
        }
    }
}

/// Offsets of each agent state and each bank in the flat ODE vector.
#[derive(Debug, Clone)]
struct Layout {
    x: Vec<(usize, usize)>,
    est: Vec<Option<(usize, usize, usize)>>,
    len: usize,
}

impl Layout {
    fn pack(&self, s: &AgentsState) -> Vec<f64> {
        let mut y = vec![0.0; self.len];
        self.pack_into(&s.x, &s.est, &mut y);
        y
    }

    fn pack_into(&self, x: &[Vec<f64>], est: &[Vec<Vec<f64>>], y: &mut [f64]) {
        for (i, &(o, d)) in self.x.iter().enumerate() {
            y[o..o + d].copy_from_slice(&x[i][..d]);
        }
        for (i, e) in self.est.iter().enumerate() {
            if let Some((o, rows, dim)) = *e {
                for r in 0..rows {
                    y[o + r * dim..o + (r + 1) * dim].copy_from_slice(&est[i][r]);
                }
            }
        }
    }

    fn unpack(&self, y: &[f64], into: &mut AgentsState) {
        for (i, &(o, d)) in self.x.iter().enumerate() {
            into.x[i].copy_from_slice(&y[o..o + d]);
        }
        for (i, e) in self.est.iter().enumerate() {
            if let Some((o, rows, dim)) = *e {
                for r in 0..rows {
                    into.est[i][r].copy_from_slice(&y[o + r * dim..o + (r + 1) * dim]);
                }
            }
        }
    }
}

/// Everything computed in one exchange round.
struct RoundEval {
    dy: Vec<f64>,
    drives: Vec<TaskDrive>,
    u: Vec<Vec<f64>>,
    dis: Vec<Option<Disagreement>>,
}

struct Engine<'a> {
    setup: &'a Setup,
    layout: Layout,
    audit: &'a LocalityAudit,
    parallel: bool,
}

impl Engine<'_> {
    fn round(&self, t: f64, state: &AgentsState, w: &[Vec<f64>]) -> Result<RoundEval> {
        let s = self.setup;
        let n = s.n_agents();
        let gc = &s.gc;
        let no_drives = vec![Vec::new(); n];
        let snap = state.snapshot(&no_drives);
        let drives = map_indexed(s.tasks.len(), self.parallel, |k| {
            let task = &s.tasks[k];
            task_drive(task, &ExchangeView::new(task.owner, gc, snap, self.audit), t)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let mut published = vec![Vec::new(); n];
        for (task, d) in s.tasks.iter().zip(&drives) {
            published[task.owner.idx()] = d.shares.clone();
        }
        let snap = state.snapshot(&published);
        let coupled_positions: Vec<&[f64]> = state.x.iter().map(Vec::as_slice).collect();
        let plant = map_indexed(n, self.parallel, |i| -> Result<(Vec<f64>, Vec<f64>)> {
            let me = AgentId::from_idx(i);
            let view = ExchangeView::new(me, gc, snap, self.audit);
            let dynm = &s.dynamics[i];
            let g: DMatrix<f64> = dynm.input_matrix(&state.x[i]);
            let u = crate::controller::control_input(&view, &s.drive_owners[i], &g)?;
            let others: Vec<&[f64]> = if dynm.is_coupled() {
                coupled_positions
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, p)| *p)
                    .collect()
            } else {
                Vec::new()
            };
            let dx = dynm.derivative(&state.x[i], &u, &w[i], &others);
            Ok((u, dx))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let dis = map_indexed(n, self.parallel, |i| -> Result<Option<Disagreement>> {
            match &s.banks[i] {
                Some(bank) => Ok(Some(disagreement(bank, gc, snap, self.audit, t)?)),
                None => Ok(None),
            }
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let mut dy = vec![0.0; self.layout.len];
        let dx: Vec<Vec<f64>> = plant.iter().map(|(_, d)| d.clone()).collect();
        let dest: Vec<Vec<Vec<f64>>> = s
            .banks
            .iter()
            .zip(&dis)
            .map(|(b, d)| match (b, d) {
                (Some(b), Some(d)) => observer_derivative(b, d, t),
                _ => Vec::new(),
            })
            .collect();
        self.layout.pack_into(&dx, &dest, &mut dy);
        Ok(RoundEval {
            dy,
            drives,
            u: plant.into_iter().map(|(u, _)| u).collect(),
            dis,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    /// `|ξ| ≥ ρ(t)` for some estimator row and component.
    ObserverFunnelExit,
    /// `|x̃| ≥ δ(t)` for some estimator row and component.
    ErrorBoundExit,
    /// Task error outside `(−1, 0)`.
    TaskFunnelExit,
    /// Observer error clamped into the guard band during an RK stage.
    ObserverClamp,
    /// Task error clamped during an RK stage.
    TaskClamp,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Event {
    pub t: f64,
    pub kind: EventKind,
    pub agent: AgentId,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<AgentId>,
    pub detail: String,
}

/// Running extremes of one estimator row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObserverOutcome {
    pub estimator: AgentId,
    pub target: AgentId,
    /// Largest `|ξ|/ρ(t)` over components and steps.
    pub max_xi_ratio: f64,
    /// Largest `|x̃|/δ(t)` over components and steps.
    pub max_error_ratio: f64,
    /// Largest `‖x̃‖` over all components.
    pub peak_error_norm: f64,
    /// Largest `‖x̃‖` over the planar position components.
    pub peak_position_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskOutcome {
    pub agent: AgentId,
    pub satisfied: bool,
    /// Robustness of the true trajectory, monitored on the log grid.
    pub margin: f64,
    /// Smallest distance of `ρ̄̂` to either funnel boundary.
    pub min_funnel_slack: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct EventCounts {
    pub observer_funnel_exits: usize,
    pub error_bound_exits: usize,
    pub task_funnel_exits: usize,
    pub observer_clamps: usize,
    pub task_clamps: usize,
    pub locality_breaches: usize,
    pub locality_reads: u64,
}

impl EventCounts {
    fn bump(&mut self, kind: EventKind) {
        match kind {
            EventKind::ObserverFunnelExit => self.observer_funnel_exits += 1,
            EventKind::ErrorBoundExit => self.error_bound_exits += 1,
            EventKind::TaskFunnelExit => self.task_funnel_exits += 1,
            EventKind::ObserverClamp => self.observer_clamps += 1,
            EventKind::TaskClamp => self.task_clamps += 1,
        }
    }

    pub fn invariant_events(&self) -> usize {
        self.observer_funnel_exits
            + self.error_bound_exits
            + self.task_funnel_exits
            + self.observer_clamps
            + self.task_clamps
            + self.locality_breaches
    }
}

/// Summary statistics gathered while stepping.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunStats {
    pub steps: usize,
    pub counts: EventCounts,
    /// Largest `|ξ − M x̃|` seen in any bank.
    pub max_disagreement_residual: f64,
    pub observers: Vec<ObserverOutcome>,
    pub task_slack: Vec<(AgentId, f64)>,
    pub max_input_norm: Vec<f64>,
    pub max_state_excursion: Vec<f64>,
}

/// A finished run: the logged table, true-state samples and events.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub samples: SampledTrajectory,
    pub events: Vec<Event>,
    pub stats: RunStats,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub dt: Option<f64>,
    pub t_end: Option<f64>,
    pub parallel: bool,
}

struct Recorder {
    events: Vec<Event>,
    counts: EventCounts,
}

impl Recorder {
    fn push(&mut self, ev: Event) {
        if self.counts.invariant_events() == 0 {
            log::warn!("first invariant event at t = {}: {:?} agent {} {}", ev.t, ev.kind, ev.agent, ev.detail);
        }
        self.counts.bump(ev.kind);
        if self.events.len() < MAX_STORED_EVENTS {
            self.events.push(ev);
        }
    }
}

fn column_names(s: &Setup) -> Vec<String> {
    let mut c = vec!["t".to_string()];
    for (i, d) in s.dynamics.iter().enumerate() {
        for k in 0..d.state_dim() {
            c.push(format!("x_{}_{k}", i + 1));
        }
    }
    for (i, d) in s.dynamics.iter().enumerate() {
        for k in 0..d.input_dim() {
            c.push(format!("u_{}_{k}", i + 1));
        }
        c.push(format!("unorm_{}", i + 1));
    }
    for (i, d) in s.dynamics.iter().enumerate() {
        for k in 0..d.state_dim() {
            c.push(format!("w_{}_{k}", i + 1));
        }
    }
    for task in &s.tasks {
        let o = task.owner.0;
        for name in ["rho_hat", "rho_true", "gamma_bar", "e", "eps"] {
            c.push(format!("{name}_{o}"));
        }
        for j in 0..task.funnels.len() {
            c.push(format!("gamma_{o}_{j}"));
            c.push(format!("Gamma_{o}_{j}"));
        }
    }
    for bank in s.banks.iter().flatten() {
        let i = bank.target.0;
        for &j in &bank.nbh.members {
            for k in 0..bank.dim {
                c.push(format!("xhat_{j}_{i}_{k}"));
            }
            for k in 0..bank.dim {
                c.push(format!("xi_{j}_{i}_{k}"));
            }
            for k in 0..bank.dim {
                c.push(format!("xtilde_{j}_{i}_{k}"));
            }
            c.push(format!("rho_{j}_{i}"));
            c.push(format!("delta_{j}_{i}"));
        }
    }
    c
}

/// Integrate the closed loop from `t = 0` to `t_end`.
///
/// Invariants are checked at every step; violations are recorded as
/// events and the run continues. A locality breach aborts the run.
pub fn run_simulation(setup: &Setup, opts: RunOptions) -> Result<Trajectory> {
    if !setup.is_feasible() {
        return Err(Error::InfeasibleRelaxation("scenario failed the feasibility report".into()));
    }
    let init = setup.initialization_check()?;
    if !init.is_empty() {
        return Err(Error::AssumptionViolation(format!("initial funnel conditions fail: {}", init.join("; "))));
    }
    let sim = &setup.scenario.sim;
    let dt = opts.dt.unwrap_or(sim.dt);
    let t_end = opts.t_end.unwrap_or(sim.t_end);
    if !(dt > 0.0 && t_end > 0.0) {
        return Err(Error::InvalidParameter("dt and t_end must be positive".into()));
    }
    let steps = (t_end / dt).round() as usize;
    let log_every = sim.log_every;
    let n = setup.n_agents();
    let audit = LocalityAudit::new();
    let engine = Engine {
        setup,
        layout: setup.layout(),
        audit: &audit,
        parallel: opts.parallel,
    };
    let mut state = setup.initial_state();
    let mut y = engine.layout.pack(&state);
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
    rng.set_stream(DISTURBANCE_STREAM);

    let mut rec = Recorder {
        events: Vec::new(),
        counts: EventCounts::default(),
    };
    let mut observers: Vec<ObserverOutcome> = setup
        .banks
        .iter()
        .flatten()
        .flat_map(|b| {
            b.nbh.members.iter().map(|&j| ObserverOutcome {
                estimator: j,
                target: b.target,
                max_xi_ratio: 0.0,
                max_error_ratio: 0.0,
                peak_error_norm: 0.0,
                peak_position_error: 0.0,
            })
        })
        .collect();
    let mut task_slack: Vec<(AgentId, f64)> = setup.tasks.iter().map(|t| (t.owner, f64::INFINITY)).collect();
    let mut max_u = vec![0.0f64; n];
    let mut max_x = vec![0.0f64; n];
    let mut residual = 0.0f64;
    let columns = column_names(setup);
    let mut rows = Vec::new();
    let mut samples = SampledTrajectory::default();

    let zero_w: Vec<Vec<f64>> = setup.dynamics.iter().map(|d| vec![0.0; d.state_dim()]).collect();
    for step in 0..=steps {
        let t = step as f64 * dt;
        let w: Vec<Vec<f64>> = if step < steps {
            setup
                .dynamics
                .iter()
                .map(|d| sample_disturbance(&mut rng, sim.w_max, d.state_dim()))
                .collect()
        } else {
            zero_w.clone()
        };
        engine.layout.unpack(&y, &mut state);
        let ev = engine.round(t, &state, &w)?;

        // Invariants at the accepted state.
        let mut obs_idx = 0;
        for (bank, dis) in setup.banks.iter().zip(&ev.dis) {
            let (Some(bank), Some(dis)) = (bank, dis) else { continue };
            let x = &state.x[bank.target.idx()];
            let est = &state.est[bank.target.idx()];
            let m = &bank.matrices.m;
            for row in 0..bank.rows() {
                let (rho, delta) = (bank.rho(row, t), bank.delta(row, t));
                let out = &mut observers[obs_idx + row];
                let mut sq = 0.0;
                let mut sq_pos = 0.0;
                for c in 0..bank.dim {
                    let err = est[row][c] - x[c];
                    sq += err * err;
                    if c < 2 {
                        sq_pos += err * err;
                    }
                    let xi = dis.xi[row][c];
                    out.max_xi_ratio = out.max_xi_ratio.max(xi.abs() / rho);
                    out.max_error_ratio = out.max_error_ratio.max(err.abs() / delta);
                    let expected: f64 = (0..bank.rows()).map(|r| m[(row, r)] * (est[r][c] - x[c])).sum();
                    residual = residual.max((expected - xi).abs());
                    if !(xi.abs() < rho) {
                        rec.push(Event {
                            t,
                            kind: EventKind::ObserverFunnelExit,
                            agent: bank.nbh.members[row],
                            target: Some(bank.target),
                            detail: format!("component {c}: |xi| = {} >= rho = {rho}", xi.abs()),
                        });
                    }
                    if !(err.abs() < delta) {
                        rec.push(Event {
                            t,
                            kind: EventKind::ErrorBoundExit,
                            agent: bank.nbh.members[row],
                            target: Some(bank.target),
                            detail: format!("component {c}: |x~| = {} >= delta = {delta}", err.abs()),
                        });
                    }
                }
                out.peak_error_norm = out.peak_error_norm.max(sq.sqrt());
                out.peak_position_error = out.peak_position_error.max(sq_pos.sqrt());
            }
            obs_idx += bank.rows();
        }
        for (k, (task, d)) in setup.tasks.iter().zip(&ev.drives).enumerate() {
            let gap = d.value.rho_bar - task.rho_max;
            let g = d.value.gamma_bar;
            task_slack[k].1 = task_slack[k].1.min((-gap).min(gap + g));
            if !(g > 0.0 && gap < 0.0 && gap > -g) {
                rec.push(Event {
                    t,
                    kind: EventKind::TaskFunnelExit,
                    agent: task.owner,
                    target: None,
                    detail: format!("rho_hat - rho_max = {gap}, Gamma_bar = {g}"),
                });
            }
        }
        for i in 0..n {
            let un = ev.u[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            max_u[i] = max_u[i].max(un);
            max_x[i] = state.x[i].iter().fold(max_x[i], |m, v| m.max(v.abs()));
        }

        if step % log_every == 0 || step == steps {
            samples.times.push(t);
            samples.states.push(state.x.clone());
            rows.push(log_row(setup, t, &state, &ev, &w)?);
        }
        if step == steps {
            break;
        }

        collect_clamps(setup, t, &ev, &mut rec);
        let k1 = ev.dy;
        let mut stage_state = state.clone();
        let mut stage = |tau: f64, k: &[f64], h: f64| -> Result<Vec<f64>> {
            let yy: Vec<f64> = y.iter().zip(k).map(|(a, b)| a + h * b).collect();
            engine.layout.unpack(&yy, &mut stage_state);
            let e = engine.round(tau, &stage_state, &w)?;
            collect_clamps(setup, tau, &e, &mut rec);
            Ok(e.dy)
        };
        let k2 = stage(t + dt / 2.0, &k1, dt / 2.0)?;
        let k3 = stage(t + dt / 2.0, &k2, dt / 2.0)?;
        let k4 = stage(t + dt, &k3, dt)?;
        for i in 0..y.len() {
            y[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    rec.counts.locality_breaches = audit.breach_count();
    rec.counts.locality_reads = audit.reads();
    Ok(Trajectory {
        columns,
        rows,
        samples,
        events: rec.events,
        stats: RunStats {
            steps,
            counts: rec.counts,
            max_disagreement_residual: residual,
            observers,
            task_slack,
            max_input_norm: max_u,
            max_state_excursion: max_x,
        },
    })
}

fn collect_clamps(setup: &Setup, t: f64, ev: &RoundEval, out: &mut Recorder) {
    for (bank, dis) in setup.banks.iter().zip(&ev.dis) {
        if let (Some(bank), Some(dis)) = (bank, dis) {
            if dis.clamps > 0 {
                out.push(Event {
                    t,
                    kind: EventKind::ObserverClamp,
                    agent: bank.target,
                    target: Some(bank.target),
                    detail: format!("{} clamped components", dis.clamps),
                });
            }
        }
    }
    for (task, d) in setup.tasks.iter().zip(&ev.drives) {
        if d.error.clamped {
            out.push(Event {
                t,
                kind: EventKind::TaskClamp,
                agent: task.owner,
                target: None,
                detail: format!("e clamped to {}", d.error.e),
            });
        }
    }
}

fn log_row(setup: &Setup, t: f64, state: &AgentsState, ev: &RoundEval, w: &[Vec<f64>]) -> Result<Vec<f64>> {
    let mut r = vec![t];
    for x in &state.x {
        r.extend_from_slice(x);
    }
    for u in &ev.u {
        r.extend_from_slice(u);
        r.push(u.iter().map(|v| v * v).sum::<f64>().sqrt());
    }
    for wi in w {
        r.extend_from_slice(wi);
    }
    for (task, d) in setup.tasks.iter().zip(&ev.drives) {
        let (truth, _) = robustness(
            &task.formula.body,
            |a: AgentId| state.x[a.idx()].as_slice(),
            RobustnessMode::Exact,
        )?;
        r.extend_from_slice(&[d.value.rho_bar, truth, d.value.gamma_bar, d.error.e, d.error.epsilon]);
        for f in &task.funnels {
            r.push(f.gamma.value(t));
            r.push(f.width(t).0);
        }
    }
    for (bank, dis) in setup.banks.iter().zip(&ev.dis) {
        let (Some(bank), Some(dis)) = (bank, dis) else { continue };
        let x = &state.x[bank.target.idx()];
        let est = &state.est[bank.target.idx()];
        for (row, e) in est.iter().enumerate().take(bank.rows()) {
            r.extend_from_slice(e);
            r.extend_from_slice(&dis.xi[row]);
            r.extend(e.iter().zip(x).map(|(a, b)| a - b));
            r.push(bank.rho(row, t));
            r.push(bank.delta(row, t));
        }
    }
    Ok(r)
}

/// Outcome of a run against the scenario's tasks.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SatisfactionReport {
    pub seed: u64,
    pub n_tasks: usize,
    pub n_satisfied: usize,
    pub tasks: Vec<TaskOutcome>,
    pub observers: Vec<ObserverOutcome>,
    pub counts: EventCounts,
    pub max_disagreement_residual: f64,
    pub max_input_norm: Vec<f64>,
    pub max_state_excursion: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub first_event: Option<Event>,
    pub pass: bool,
}

/// Monitor every task on the logged true states and collect run statistics.
/// The run passes iff every task margin is positive and no invariant event occurred.
pub fn satisfaction_report(setup: &Setup, traj: &Trajectory) -> Result<SatisfactionReport> {
    let margins = monitor_tasks(&setup.scenario, &traj.samples)?;
    let slack: BTreeMap<AgentId, f64> = traj.stats.task_slack.iter().copied().collect();
    let tasks: Vec<TaskOutcome> = margins
        .tasks
        .iter()
        .map(|m| TaskOutcome {
            agent: m.agent,
            satisfied: m.satisfied,
            margin: m.margin,
            min_funnel_slack: slack.get(&m.agent).copied().unwrap_or(f64::INFINITY),
        })
        .collect();
    let n_satisfied = tasks.iter().filter(|t| t.satisfied).count();
    let pass = n_satisfied == tasks.len() && traj.stats.counts.invariant_events() == 0;
    Ok(SatisfactionReport {
        seed: setup.seed,
        n_tasks: tasks.len(),
        n_satisfied,
        tasks,
        observers: traj.stats.observers.clone(),
        counts: traj.stats.counts.clone(),
        max_disagreement_residual: traj.stats.max_disagreement_residual,
        max_input_norm: traj.stats.max_input_norm.clone(),
        max_state_excursion: traj.stats.max_state_excursion.clone(),
        first_event: traj.events.first().cloned(),
        pass,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskMargin {
    pub agent: AgentId,
    pub satisfied: bool,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonitorReport {
    pub tasks: Vec<TaskMargin>,
    pub all_satisfied: bool,
}

/// Exact-semantics margins of every task on a sampled trajectory.
pub fn monitor_tasks(scenario: &Scenario, traj: &SampledTrajectory) -> Result<MonitorReport> {
    let mut tasks = Vec::with_capacity(scenario.tasks.len());
    for spec in &scenario.tasks {
        let phi: TemporalFormula = spec.compile().map_err(Error::InvalidParameter)?;
        let (satisfied, margin) = monitor_trajectory(&phi, traj)?;
        tasks.push(TaskMargin {
            agent: AgentId(spec.agent),
            satisfied,
            margin,
        });
    }
    Ok(MonitorReport {
        all_satisfied: tasks.iter().all(|t| t.satisfied),
        tasks,
    })
}

/// Write the logged table. Values use the shortest round-trip formatting,
/// so identical runs give identical bytes.
pub fn write_csv<W: Write>(traj: &Trajectory, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(&traj.columns)?;
    for row in &traj.rows {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct EventLog<'a> {
    pub counts: &'a EventCounts,
    pub truncated: bool,
    pub events: &'a [Event],
}

pub fn event_log(traj: &Trajectory) -> EventLog<'_> {
    EventLog {
        counts: &traj.stats.counts,
        truncated: traj.stats.counts.invariant_events() - traj.stats.counts.locality_breaches > traj.events.len(),
        events: &traj.events,
    }
}

/// Write `trajectory.csv`, `events.json` and `report.json` into `dir`.
pub fn write_outputs(dir: &Path, traj: &Trajectory, report: &SatisfactionReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let f = std::io::BufWriter::new(std::fs::File::create(dir.join("trajectory.csv"))?);
    write_csv(traj, f)?;
    std::fs::write(dir.join("events.json"), serde_json::to_string_pretty(&event_log(traj))?)?;
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)?)?;
    Ok(())
}

/// Read true states back from a trajectory CSV. Agent state sizes come from the scenario.
pub fn read_trajectory_csv(path: &Path, scenario: &Scenario) -> Result<SampledTrajectory> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InsufficientData(format!("column {name} missing")))
    };
    let t_col = find("t")?;
    let mut cols = Vec::new();
    for a in &scenario.agents {
        let idx = (0..a.dynamics.state_dim())
            .map(|c| find(&format!("x_{}_{c}", a.id)))
            .collect::<Result<Vec<_>>>()?;
        cols.push(idx);
    }
    let mut traj = SampledTrajectory::default();
    for rec in rdr.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::InsufficientData(format!("bad value in column {i}")))
        };
        traj.times.push(num(t_col)?);
        traj.states.push(
            cols.iter()
                .map(|c| c.iter().map(|&i| num(i)).collect::<Result<Vec<_>>>())
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok(traj)
}
