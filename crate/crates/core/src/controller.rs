//! Task errors, conjunction funnels and the funnel feedback law.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::AgentId;
use crate::observer::{DriveShare, ExchangeView};
use crate::ppf::TaskFunnel;
use crate::stl::{combine_gradients, smooth_min, Gradient, Literal, RobustnessMode, TemporalFormula};

/// Normalized task errors are clamped into `(−1 + E_GUARD, −E_GUARD)`.
pub const E_GUARD: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TaskError {
    pub e: f64,
    pub epsilon: f64,
    pub jacobian: f64,
    pub clamped: bool,
}

/// `e = Γ⁻¹(ρ̂ − ρ^max)`, `ε = ln(−(e+1)/e)`, `J = −1/(e(e+1))`.
pub fn task_error(rho_hat: f64, rho_max: f64, gamma_t: f64) -> TaskError {
    let raw = (rho_hat - rho_max) / gamma_t;
    let (lo, hi) = (-1.0 + E_GUARD, -E_GUARD);
    let clamped = !(gamma_t > 0.0 && raw > lo && raw < hi);
    let e = if raw.is_nan() { -0.5 } else { raw.clamp(lo, hi) };
    TaskError {
        e,
        epsilon: (-(e + 1.0) / e).ln(),
        jacobian: -1.0 / (e * (e + 1.0)),
        clamped,
    }
}

/// A task compiled for control: literals, per-literal funnels and the
/// split between communicating and estimated participants.
#[derive(Debug, Clone)]
pub struct CompiledTask {
    pub owner: AgentId,
    pub formula: TemporalFormula,
    pub literals: Vec<Literal>,
    pub funnels: Vec<TaskFunnel>,
    pub rho_max: f64,
    pub eta: f64,
    pub known: Vec<AgentId>,
    pub estimated: Vec<AgentId>,
}

impl CompiledTask {
    pub fn is_estimated(&self, a: AgentId) -> bool {
        self.estimated.binary_search(&a).is_ok()
    }

    /// `Γ̄(t)`: smooth minimum of the per-literal widths.
    pub fn gamma_bar(&self, t: f64) -> f64 {
        let w: Vec<f64> = self.funnels.iter().map(|f| f.width(t).0).collect();
        smooth_min(&w, self.eta).0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConjunctionValue {
    pub gamma_bar: f64,
    pub rho_bar: f64,
    pub gradient: Gradient,
    /// Per-literal robustness values.
    pub literal_values: Vec<f64>,
}

/// `(Γ̄, ρ̄̂, ∇ρ̄̂)` at time `t`. `state(a)` returns the value used for
/// participant `a` (true or estimated).
pub fn conjunction_funnel<'a, F>(task: &CompiledTask, t: f64, state: F) -> Result<ConjunctionValue>
where
    F: Fn(AgentId) -> &'a [f64] + Copy,
{
    let mut vals = Vec::with_capacity(task.literals.len());
    let mut grads = Vec::with_capacity(task.literals.len());
    for l in &task.literals {
        let (v, g) = l.eval(state)?;
        vals.push(v);
        grads.push(g);
    }
    let (rho_bar, w) = smooth_min(&vals, task.eta);
    Ok(ConjunctionValue {
        gamma_bar: task.gamma_bar(t),
        rho_bar,
        gradient: combine_gradients(&grads, &w),
        literal_values: vals,
    })
}

/// What a task owner computes and publishes in one round.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDrive {
    pub error: TaskError,
    pub value: ConjunctionValue,
    pub shares: Vec<DriveShare>,
}

/// Evaluate a task from its owner's view: true states of communicating
/// participants, the owner's own estimates for the rest. Estimated
/// participants receive no drive.
pub fn task_drive(task: &CompiledTask, view: &ExchangeView<'_>, t: f64) -> Result<TaskDrive> {
    debug_assert_eq!(view.reader(), task.owner);
    let mut cache: Vec<(AgentId, &[f64])> = Vec::new();
    for &p in &task.known {
        cache.push((p, view.state(p)?));
    }
    for &p in &task.estimated {
        cache.push((p, view.estimate(task.owner, p)?));
    }
    let lookup = |a: AgentId| -> &[f64] {
        cache
            .iter()
            .find(|(b, _)| *b == a)
            .map(|(_, x)| *x)
            .unwrap_or(&[])
    };
    let value = conjunction_funnel(task, t, lookup)?;
    let error = task_error(value.rho_bar, task.rho_max, value.gamma_bar);
    let scale = error.jacobian * error.epsilon / value.gamma_bar.max(f64::MIN_POSITIVE);
    let shares = task
        .known
        .iter()
        .filter_map(|p| {
            value.gradient.get(p).map(|g| DriveShare {
                participant: *p,
                vector: g.iter().map(|v| v * scale).collect(),
            })
        })
        .collect();
    Ok(TaskDrive { error, value, shares })
}

/// `u = −gᵀ Σ_owners drive`, where `owners` lists the tasks in which the
/// reader is a communicating participant.
pub fn control_input(view: &ExchangeView<'_>, owners: &[AgentId], g: &DMatrix<f64>) -> Result<Vec<f64>> {
    let n = g.nrows();
    let mut sum = vec![0.0; n];
    for &o in owners {
        if let Some(v) = view.drive_from(o)? {
            for (s, x) in sum.iter_mut().zip(v) {
                *s += x;
            }
        }
    }
    Ok((0..g.ncols())
        .map(|c| -(0..n).map(|r| g[(r, c)] * sum[r]).sum::<f64>())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Certificate {
    /// Supremum known in closed form.
    Analytic,
    /// Robustness at a witness state, a lower bound on the supremum.
    LowerBound,
    /// Neither available.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RhoMaxReport {
    pub task: AgentId,
    pub rho_max: f64,
    pub bound: Option<f64>,
    pub certificate: Certificate,
    pub pass: Option<bool>,
}

/// Check `0 < ρ^max < ρ^opt`, using the closed form for a single norm-ball
/// or bound literal and the witness otherwise.
pub fn validate_rho_max<'a, F>(task: &CompiledTask, witness: Option<F>) -> Result<RhoMaxReport>
where
    F: Fn(AgentId) -> &'a [f64] + Copy,
{
    let analytic = match task.literals.as_slice() {
        [l] if !l.negated => l.predicate.sup(),
        _ => None,
    };
    let (bound, certificate) = match (analytic, witness) {
        (Some(b), _) => (Some(b), Certificate::Analytic),
        (None, Some(w)) => {
            let (v, _) = crate::stl::robustness(
                &crate::stl::NonTemporalFormula::And(
                    task.literals
                        .iter()
                        .map(|l| {
                            if l.negated {
                                crate::stl::NonTemporalFormula::NotPred(l.predicate.clone())
                            } else {
                                crate::stl::NonTemporalFormula::Pred(l.predicate.clone())
                            }
                        })
                        .collect(),
                ),
                w,
                RobustnessMode::Smooth { eta: task.eta },
            )?;
            (Some(v), Certificate::LowerBound)
        }
        (None, None) => (None, Certificate::None),
    };
    if !(task.rho_max > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "rho_max of task {} must be positive",
            task.owner
        )));
    }
    let pass = bound.map(|b| task.rho_max < b);
    Ok(RhoMaxReport {
        task: task.owner,
        rho_max: task.rho_max,
        bound,
        certificate,
        pass,
    })
}
