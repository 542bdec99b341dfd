//! Prescribed performance functions, observer funnel design, worst-case
//! estimation penalties and task funnels.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, FunnelConstraint, Result};
use crate::graph::{min_eigenvalue_check, AgentId, InducedMatrices};
use crate::stl::TimeWindow;

/// Sampling step used when a constraint is checked on a time grid.
pub const CHECK_STEP: f64 = 1e-3;

pub trait PerformanceFunction {
    fn value(&self, t: f64) -> f64;
    fn derivative(&self, t: f64) -> f64;
    /// Limit as `t → ∞`.
    fn steady(&self) -> f64;
}

/// `(ρ0 − ρ∞)·e^{−lt} + ρ∞`
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExpPpf {
    pub rho0: f64,
    pub rho_inf: f64,
    pub l: f64,
}

impl ExpPpf {
    pub fn new(rho0: f64, rho_inf: f64, l: f64) -> Result<Self> {
        if !(rho_inf > 0.0 && rho0 >= rho_inf && l > 0.0 && rho0.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "not a decreasing exponential PPF: rho0={rho0}, rho_inf={rho_inf}, l={l}"
            )));
        }
        Ok(ExpPpf { rho0, rho_inf, l })
    }

    /// A constant funnel, used in tests and for degenerate designs.
    pub fn constant(v: f64) -> Self {
        ExpPpf {
            rho0: v,
            rho_inf: v,
            l: 1.0,
        }
    }

    pub fn eval(&self, t: f64) -> (f64, f64) {
        let e = (-self.l * t).exp();
        let span = self.rho0 - self.rho_inf;
        (span * e + self.rho_inf, -self.l * span * e)
    }

    pub fn scaled(&self, s: f64) -> Self {
        ExpPpf {
            rho0: self.rho0 * s,
            rho_inf: self.rho_inf * s,
            l: self.l,
        }
    }

    /// Upper bound on `|ρ̇|`.
    pub fn derivative_bound(&self) -> f64 {
        self.l * (self.rho0 - self.rho_inf)
    }
}

impl PerformanceFunction for ExpPpf {
    fn value(&self, t: f64) -> f64 {
        self.eval(t).0
    }
    fn derivative(&self, t: f64) -> f64 {
        self.eval(t).1
    }
    fn steady(&self) -> f64 {
        self.rho_inf
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregate {
    Sum,
    Norm,
}

/// Sum or Euclidean norm of exponential PPFs, with certified bounds
/// `0 < lower ≤ value ≤ bound` and `|derivative| ≤ derivative_bound`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertifiedPpf {
    pub aggregate: Aggregate,
    pub parts: Vec<ExpPpf>,
    pub lower: f64,
    pub bound: f64,
    pub derivative_bound: f64,
}

impl PerformanceFunction for CertifiedPpf {
    fn value(&self, t: f64) -> f64 {
        match self.aggregate {
            Aggregate::Sum => self.parts.iter().map(|p| p.value(t)).sum(),
            Aggregate::Norm => self.parts.iter().map(|p| p.value(t).powi(2)).sum::<f64>().sqrt(),
        }
    }

    fn derivative(&self, t: f64) -> f64 {
        match self.aggregate {
            Aggregate::Sum => self.parts.iter().map(|p| p.derivative(t)).sum(),
            Aggregate::Norm => {
                let n = self.value(t);
                self.parts
                    .iter()
                    .map(|p| {
                        let (v, d) = p.eval(t);
                        v * d
                    })
                    .sum::<f64>()
                    / n
            }
        }
    }

    fn steady(&self) -> f64 {
        match self.aggregate {
            Aggregate::Sum => self.parts.iter().map(|p| p.rho_inf).sum(),
            Aggregate::Norm => self.parts.iter().map(|p| p.rho_inf.powi(2)).sum::<f64>().sqrt(),
        }
    }
}

fn nonempty(ps: &[ExpPpf]) -> Result<()> {
    if ps.is_empty() {
        return Err(Error::InvalidParameter("empty PPF list".into()));
    }
    Ok(())
}

pub fn ppf_sum(ps: &[ExpPpf]) -> Result<CertifiedPpf> {
    nonempty(ps)?;
    Ok(CertifiedPpf {
        aggregate: Aggregate::Sum,
        parts: ps.to_vec(),
        lower: ps.iter().map(|p| p.rho_inf).sum(),
        bound: ps.iter().map(|p| p.rho0).sum(),
        derivative_bound: ps.iter().map(ExpPpf::derivative_bound).sum(),
    })
}

pub fn ppf_norm(ps: &[ExpPpf]) -> Result<CertifiedPpf> {
    nonempty(ps)?;
    let l2 = |f: &dyn Fn(&ExpPpf) -> f64| ps.iter().map(|p| f(p).powi(2)).sum::<f64>().sqrt();
    Ok(CertifiedPpf {
        aggregate: Aggregate::Norm,
        parts: ps.to_vec(),
        lower: l2(&|p| p.rho_inf),
        bound: l2(&|p| p.rho0),
        // |d‖ρ‖/dt| ≤ ‖ρ̇‖ and each |ρ̇_k| peaks at t = 0.
        derivative_bound: l2(&|p| p.derivative_bound()),
    })
}

/// Observer funnels of one bank: target bounds `δ_j` and disagreement
/// funnels `ρ_j` for every estimator row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObserverFunnelSet {
    pub deltas: Vec<ExpPpf>,
    pub rhos: Vec<ExpPpf>,
    pub shares: Vec<f64>,
    /// `Σ_r |(M⁻¹)_{jr}| s_r` per row.
    pub weighted_row_sums: Vec<f64>,
    /// Row for which the design holds with equality at `t = 0`.
    pub tight_row: usize,
    #[serde(skip)]
    pub m_inv_abs: DMatrix<f64>,
}

impl ObserverFunnelSet {
    /// `Σ_r |(M⁻¹)_{jr}| ρ_r(t)` per row: the certified bound on `|x̃_j|`.
    pub fn reconstructed_bounds(&self, t: f64) -> Vec<f64> {
        let rho: Vec<f64> = self.rhos.iter().map(|p| p.value(t)).collect();
        abs_inverse_times(&self.m_inv_abs, &rho)
    }

    /// Largest `bound_j(t) − δ_j(t)` over rows (non-positive when the design holds).
    pub fn worst_row_slack(&self, t: f64) -> f64 {
        self.reconstructed_bounds(t)
            .iter()
            .zip(&self.deltas)
            .map(|(b, d)| b - d.value(t))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

fn abs_inverse_times(m_inv_abs: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    (0..m_inv_abs.nrows())
        .map(|j| (0..v.len()).map(|r| m_inv_abs[(j, r)] * v[r]).sum())
        .collect()
}

/// Elementwise `|M⁻¹|`.
pub fn abs_inverse(m: &InducedMatrices) -> Result<DMatrix<f64>> {
    Ok(m.inverse()?.abs())
}

/// Disagreement funnels `ρ_r = s_r·β` with `β = min_j δ_j / Σ_r |(M⁻¹)_{jr}| s_r`.
/// All `δ_j` must share one decay rate.
pub fn design_observer_funnels(
    m: &InducedMatrices,
    deltas: &[ExpPpf],
    shares: Option<&[f64]>,
) -> Result<ObserverFunnelSet> {
    let n = m.dim();
    if deltas.len() != n {
        return Err(Error::InvalidParameter(format!(
            "{} delta funnels for a {n}x{n} matrix",
            deltas.len()
        )));
    }
    let l = deltas[0].l;
    if deltas.iter().any(|d| (d.l - l).abs() > 1e-12 * l.max(1.0)) {
        return Err(Error::InvalidParameter(
            "all delta funnels of one bank must share the decay rate".into(),
        ));
    }
    let shares: Vec<f64> = match shares {
        Some(s) if s.len() == n && s.iter().all(|v| *v > 0.0) => s.to_vec(),
        Some(_) => return Err(Error::InvalidParameter("shares must be positive, one per row".into())),
        None => vec![1.0; n],
    };
    min_eigenvalue_check(m)?;
    let m_inv_abs = abs_inverse(m)?;
    let weighted = abs_inverse_times(&m_inv_abs, &shares);
    let (mut b0, mut binf, mut tight) = (f64::INFINITY, f64::INFINITY, 0);
    for j in 0..n {
        let r0 = deltas[j].rho0 / weighted[j];
        if r0 < b0 {
            b0 = r0;
            tight = j;
        }
        binf = binf.min(deltas[j].rho_inf / weighted[j]);
    }
    // ρ(t) = w·ρ0 + (1−w)·ρ∞ with w = e^{−lt}, so checking rows at both ends covers every t.
    let rhos = shares
        .iter()
        .map(|s| ExpPpf {
            rho0: s * b0,
            rho_inf: s * binf,
            l,
        })
        .collect();
    Ok(ObserverFunnelSet {
        deltas: deltas.to_vec(),
        rhos,
        shares,
        weighted_row_sums: weighted,
        tight_row: tight,
        m_inv_abs,
    })
}

/// Row-wise check `Σ_r |(M⁻¹)_{jr}| ρ_r ≤ δ_j` at one instant.
pub fn rows_within(m_inv_abs: &DMatrix<f64>, rho: &[f64], delta: &[f64], tol: f64) -> bool {
    abs_inverse_times(m_inv_abs, rho)
        .iter()
        .zip(delta)
        .all(|(b, d)| *b <= d + tol)
}

/// Norm check `‖ρ‖ ≤ λ_min(M)·min_j δ_j` at one instant.
pub fn norm_within(lambda_min: f64, rho: &[f64], delta: &[f64], tol: f64) -> bool {
    let norm = rho.iter().map(|r| r * r).sum::<f64>().sqrt();
    let dmin = delta.iter().copied().fold(f64::INFINITY, f64::min);
    norm <= lambda_min * dmin + tol
}

/// Norm-form funnel constraint sampled on `[0, 5/l]`.
pub fn legacy_norm_constraint_check(rhos: &[ExpPpf], m: &InducedMatrices, deltas: &[ExpPpf]) -> bool {
    let lmin = m.lambda_min();
    let l = rhos
        .iter()
        .chain(deltas)
        .map(|p| p.l)
        .fold(f64::INFINITY, f64::min);
    let t_end = 5.0 / l;
    let steps = 500;
    (0..=steps).all(|k| {
        let t = t_end * k as f64 / steps as f64;
        let r: Vec<f64> = rhos.iter().map(|p| p.value(t)).collect();
        let d: Vec<f64> = deltas.iter().map(|p| p.value(t)).collect();
        norm_within(lmin, &r, &d, 1e-12)
    })
}

/// One additive piece of a worst-case robustness penalty.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PenaltyTerm {
    /// `2δr − δ²` for a norm-ball or bound predicate of radius `r`.
    NormBall { agent: AgentId, delta: CertifiedPpf, r: f64 },
    /// `gain·δ` for an affine predicate.
    Linear { agent: AgentId, delta: CertifiedPpf, gain: f64 },
}

impl PenaltyTerm {
    fn eval(&self, t: f64) -> (f64, f64) {
        match self {
            PenaltyTerm::NormBall { delta, r, .. } => {
                let (d, dd) = (delta.value(t), delta.derivative(t));
                (2.0 * d * r - d * d, (2.0 * r - 2.0 * d) * dd)
            }
            PenaltyTerm::Linear { delta, gain, .. } => (gain * delta.value(t), gain * delta.derivative(t)),
        }
    }

    fn steady(&self) -> f64 {
        match self {
            PenaltyTerm::NormBall { delta, r, .. } => {
                let d = delta.steady();
                2.0 * d * r - d * d
            }
            PenaltyTerm::Linear { delta, gain, .. } => gain * delta.steady(),
        }
    }
}

/// Worst-case robustness loss `ρᵗ(t)` caused by estimation errors. Zero
/// when the conjunct involves no estimated participant.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Penalty {
    pub terms: Vec<PenaltyTerm>,
    pub scale: f64,
}

impl Default for Penalty {
    fn default() -> Self {
        Penalty {
            terms: Vec::new(),
            scale: 1.0,
        }
    }
}

impl Penalty {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn scaled(mut self, s: f64) -> Self {
        self.scale *= s;
        self
    }

    pub fn eval(&self, t: f64) -> (f64, f64) {
        self.terms.iter().fold((0.0, 0.0), |(v, d), term| {
            let (tv, td) = term.eval(t);
            (v + self.scale * tv, d + self.scale * td)
        })
    }

    pub fn value(&self, t: f64) -> f64 {
        self.eval(t).0
    }

    pub fn steady(&self) -> f64 {
        self.scale * self.terms.iter().map(PenaltyTerm::steady).sum::<f64>()
    }

    /// Maximum over the window, sampled at [`CHECK_STEP`].
    pub fn max_on(&self, w: TimeWindow) -> f64 {
        if self.is_zero() {
            return 0.0;
        }
        grid(w.lo, w.hi).map(|t| self.value(t)).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn add(&mut self, other: Penalty) {
        debug_assert_eq!(other.scale, 1.0);
        self.terms.extend(other.terms);
    }
}

fn grid(lo: f64, hi: f64) -> impl Iterator<Item = f64> {
    let n = ((hi - lo) / CHECK_STEP).round().max(0.0) as usize;
    (0..=n).map(move |k| if n == 0 { lo } else { lo + (hi - lo) * k as f64 / n as f64 })
}

/// Penalty `2δ(t)r − δ(t)²` for a norm-ball predicate whose estimated
/// participant has aggregated error bound `δ`.
pub fn rho_t_normball(agent: AgentId, delta_norm: CertifiedPpf, r: f64) -> Result<Penalty> {
    if !(r > 0.0) {
        return Err(Error::InvalidParameter(format!("radius must be positive, got {r}")));
    }
    let d0 = delta_norm.value(0.0);
    if d0 >= r {
        return Err(Error::InfeasibleRelaxation(format!(
            "error bound {d0} of agent {agent} is not below the radius {r}"
        )));
    }
    Ok(Penalty {
        terms: vec![PenaltyTerm::NormBall {
            agent,
            delta: delta_norm,
            r,
        }],
        scale: 1.0,
    })
}

/// Penalty `‖a‖·δ(t)` for an affine predicate.
pub fn rho_t_affine(agent: AgentId, delta_norm: CertifiedPpf, gain: f64) -> Penalty {
    Penalty {
        terms: vec![PenaltyTerm::Linear {
            agent,
            delta: delta_norm,
            gain,
        }],
        scale: 1.0,
    }
}

/// Slack terms that keep the funnel inequalities strict.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FunnelMargins {
    pub ss: f64,
    pub win: f64,
    pub init: f64,
}

impl FunnelMargins {
    pub fn defaults(rho_max: f64) -> Self {
        FunnelMargins {
            ss: 0.05 * rho_max,
            win: 0.01 * rho_max,
            init: 1e-3,
        }
    }
}

/// Decay rate used when the window constraint is already met at `t = 0`.
pub const RELAXED_DECAY: f64 = 0.1;

/// Funnel `−Γ(t) < ρ̂ − ρ^max < 0` with `Γ = γ − ρᵗ`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskFunnel {
    pub gamma: ExpPpf,
    pub rho_max: f64,
    pub penalty: Penalty,
    pub window: TimeWindow,
}

impl TaskFunnel {
    /// `(Γ(t), Γ̇(t))`
    pub fn width(&self, t: f64) -> (f64, f64) {
        let (g, gd) = self.gamma.eval(t);
        let (p, pd) = self.penalty.eval(t);
        (g - p, gd - pd)
    }

    /// Horizon used for grid checks of the width.
    pub fn check_horizon(&self) -> f64 {
        let slowest = self
            .penalty
            .terms
            .iter()
            .flat_map(|t| match t {
                PenaltyTerm::NormBall { delta, .. } | PenaltyTerm::Linear { delta, .. } => {
                    delta.parts.iter().map(|p| p.l).collect::<Vec<_>>()
                }
            })
            .fold(self.gamma.l, f64::min);
        self.window.hi.max(12.0 / slowest)
    }

    /// Smallest `Γ(t)` on a grid over [`Self::check_horizon`].
    pub fn min_width(&self) -> f64 {
        let h = self.check_horizon();
        let step = (h / 20_000.0).max(CHECK_STEP);
        let n = (h / step).ceil() as usize;
        (0..=n)
            .map(|k| self.width(k as f64 * step).0)
            .chain(std::iter::once(self.gamma.rho_inf - self.penalty.steady()))
            .fold(f64::INFINITY, f64::min)
    }
}

fn infeasible(binding: FunnelConstraint, detail: String) -> Error {
    Error::InfeasibleFunnel { binding, detail }
}

/// Construct `γ` for one conjunct.
///
/// `init_robustness` is the estimated robustness at `t = 0`;
/// `init_position ∈ (0, 1]` places it at `e(0) = −init_position`.
pub fn build_task_funnel(
    penalty: Penalty,
    rho_max: f64,
    init_robustness: f64,
    window: TimeWindow,
    margins: FunnelMargins,
    init_position: f64,
) -> Result<TaskFunnel> {
    if !(rho_max > 0.0) {
        return Err(Error::InvalidParameter(format!("rho_max must be positive, got {rho_max}")));
    }
    if !(init_position > 0.0 && init_position <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "init_position must lie in (0, 1], got {init_position}"
        )));
    }
    let pen_win = penalty.max_on(window);
    if rho_max - pen_win <= 0.0 {
        return Err(infeasible(
            FunnelConstraint::PenaltyVsRhoMax,
            format!("rho_max {rho_max} <= max window penalty {pen_win}"),
        ));
    }
    if init_robustness >= rho_max {
        return Err(infeasible(
            FunnelConstraint::InitialRobustnessAboveMax,
            format!("initial robustness {init_robustness} >= rho_max {rho_max}"),
        ));
    }
    let pen0 = penalty.value(0.0);
    let g_inf = penalty.steady() + margins.ss;
    let cap = rho_max - pen_win - margins.win;
    if cap <= g_inf {
        return Err(infeasible(
            FunnelConstraint::SteadyStateVsWindow,
            format!("window cap {cap} <= steady value {g_inf}"),
        ));
    }
    let gap = rho_max - init_robustness;
    let g0 = (pen0 + gap / init_position)
        .max(pen0 + gap + margins.init)
        .max(g_inf);
    let l = if g0 <= cap {
        RELAXED_DECAY
    } else if window.lo <= 0.0 {
        return Err(infeasible(
            FunnelConstraint::InitializationVsWindow,
            format!("initial width {g0} exceeds window cap {cap} at t = 0"),
        ));
    } else {
        ((g0 - g_inf) / (cap - g_inf)).ln() / window.lo
    };
    let funnel = TaskFunnel {
        gamma: ExpPpf {
            rho0: g0,
            rho_inf: g_inf,
            l,
        },
        rho_max,
        penalty,
        window,
    };
    let w = funnel.min_width();
    if w <= 0.0 {
        return Err(infeasible(
            FunnelConstraint::PositiveWidth,
            format!("funnel width reaches {w}"),
        ));
    }
    Ok(funnel)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Fail,
    Unchecked,
}

/// Per-conjunct input to [`feasibility_report`].
#[derive(Debug, Clone)]
pub struct FeasibilityInput {
    pub task: AgentId,
    pub conjunct: usize,
    pub rho_max: f64,
    pub window: TimeWindow,
    pub penalty: Penalty,
    /// `None` when construction failed; the error text is carried instead.
    pub funnel: std::result::Result<TaskFunnel, String>,
    /// Robustness of the conjunct at the witness state, if one was supplied.
    pub witness_robustness: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConjunctFeasibility {
    pub task: AgentId,
    pub conjunct: usize,
    pub positive_width: CheckStatus,
    pub min_width: Option<f64>,
    pub penalty_below_rho_max: CheckStatus,
    pub rho_max_minus_penalty: f64,
    pub witness_margin: CheckStatus,
    pub witness_value: Option<f64>,
    pub funnel_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeasibilityReport {
    pub conjuncts: Vec<ConjunctFeasibility>,
    pub condition_i: CheckStatus,
    pub condition_ii: CheckStatus,
    pub condition_iii: CheckStatus,
    /// Smallest `ρ(x_w) − max-window ρᵗ` over all conjuncts, when every witness was supplied.
    pub witness_min: Option<f64>,
    pub feasible: bool,
}

fn fold_status(it: impl Iterator<Item = CheckStatus>) -> CheckStatus {
    let mut out = CheckStatus::Pass;
    for s in it {
        match s {
            CheckStatus::Fail => return CheckStatus::Fail,
            CheckStatus::Unchecked => out = CheckStatus::Unchecked,
            CheckStatus::Pass => {}
        }
    }
    out
}

/// Conditions (i) positive funnel width, (ii) penalty below `ρ^max` inside
/// the window, and (iii) a witness whose robustness clears the penalty.
/// A witness that fails (iii) only leaves it unchecked.
pub fn feasibility_report(inputs: &[FeasibilityInput]) -> FeasibilityReport {
    let mut rows = Vec::with_capacity(inputs.len());
    let mut witness_min: Option<f64> = Some(f64::INFINITY);
    for inp in inputs {
        let pen_win = inp.penalty.max_on(inp.window);
        let slack = inp.rho_max - pen_win;
        let (positive_width, min_width, funnel_error) = match &inp.funnel {
            Ok(f) => {
                let w = f.min_width();
                (
                    if w > 0.0 { CheckStatus::Pass } else { CheckStatus::Fail },
                    Some(w),
                    None,
                )
            }
            Err(e) => (CheckStatus::Fail, None, Some(e.clone())),
        };
        let witness_value = inp.witness_robustness.map(|r| r - pen_win);
        witness_min = match (witness_min, witness_value) {
            (Some(a), Some(b)) => Some(a.min(b)),
            _ => None,
        };
        let witness_margin = match witness_value {
            Some(v) if v > 0.0 => CheckStatus::Pass,
            _ => CheckStatus::Unchecked,
        };
        rows.push(ConjunctFeasibility {
            task: inp.task,
            conjunct: inp.conjunct,
            positive_width,
            min_width,
            penalty_below_rho_max: if slack > 0.0 { CheckStatus::Pass } else { CheckStatus::Fail },
            rho_max_minus_penalty: slack,
            witness_margin,
            witness_value,
            funnel_error,
        });
    }
    if inputs.is_empty() {
        witness_min = None;
    }
    let condition_i = fold_status(rows.iter().map(|r| r.positive_width));
    let condition_ii = fold_status(rows.iter().map(|r| r.penalty_below_rho_max));
    let condition_iii = fold_status(rows.iter().map(|r| r.witness_margin));
    FeasibilityReport {
        feasible: condition_i == CheckStatus::Pass && condition_ii == CheckStatus::Pass,
        conjuncts: rows,
        condition_i,
        condition_ii,
        condition_iii,
        witness_min,
    }
}
