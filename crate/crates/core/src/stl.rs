//! STL fragment: predicates, conjunctions, G/F/FG operators, robust
//! semantics with an optional log-sum-exp conjunction, and a grid monitor.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::error::{Error, Result};
use crate::graph::{AgentId, CommGraph, TaskGraph};

/// Default smoothing parameter for conjunctions.
pub const DEFAULT_ETA: f64 = 20.0;

const GRID_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub enum PredicateKind {
    /// `r² − ‖x_i − x_j − d‖²` over the two participants.
    NormBallRelative { r: f64, d: Vec<f64> },
    /// `r² − ‖x_i − c‖²` over a single participant.
    NormBallAbsolute { r: f64, c: Vec<f64> },
    /// `C̄² − ‖x‖²` over the stacked components of all participants.
    Bound { c_bar: f64 },
    /// `aᵀx + b` over the stacked components of all participants.
    Affine { a: Vec<f64>, b: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predicate {
    pub kind: PredicateKind,
    pub participants: Vec<AgentId>,
    /// State components of each participant entering the predicate.
    pub components: Vec<usize>,
}

impl Predicate {
    pub fn new(kind: PredicateKind, participants: Vec<AgentId>, components: Vec<usize>) -> Result<Self> {
        let p = Predicate {
            kind,
            participants,
            components,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let nc = self.components.len();
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if nc == 0 {
            return bad("predicate uses no state components".into());
        }
        if self.participants.is_empty() {
            return bad("predicate has no participants".into());
        }
        match &self.kind {
            PredicateKind::NormBallRelative { r, d } => {
                if !(*r > 0.0) {
                    return bad(format!("radius must be positive, got {r}"));
                }
                if self.participants.len() != 2 || d.len() != nc {
                    return bad("relative norm ball needs two participants and |d| = |components|".into());
                }
            }
            PredicateKind::NormBallAbsolute { r, c } => {
                if !(*r > 0.0) {
                    return bad(format!("radius must be positive, got {r}"));
                }
                if self.participants.len() != 1 || c.len() != nc {
                    return bad("absolute norm ball needs one participant and |c| = |components|".into());
                }
            }
            PredicateKind::Bound { c_bar } => {
                if !(*c_bar > 0.0) {
                    return bad(format!("bound must be positive, got {c_bar}"));
                }
            }
            PredicateKind::Affine { a, .. } => {
                if a.len() != nc * self.participants.len() {
                    return bad("affine coefficient length mismatch".into());
                }
            }
        }
        Ok(())
    }

    /// Supremum of the predicate function over all states, if finite.
    pub fn sup(&self) -> Option<f64> {
        match &self.kind {
            PredicateKind::NormBallRelative { r, .. } | PredicateKind::NormBallAbsolute { r, .. } => Some(r * r),
            PredicateKind::Bound { c_bar } => Some(c_bar * c_bar),
            PredicateKind::Affine { a, b } => {
                if a.iter().all(|v| *v == 0.0) {
                    Some(*b)
                } else {
                    None
                }
            }
        }
    }
}

/// Gradient of a robustness value with respect to each participant's full state.
pub type Gradient = BTreeMap<AgentId, Vec<f64>>;

fn add_into(g: &mut Gradient, a: AgentId, dim: usize, comp: usize, v: f64) {
    let e = g.entry(a).or_insert_with(|| vec![0.0; dim]);
    e[comp] += v;
}

/// Evaluate a predicate and its gradient. `state(a)` returns agent `a`'s full state.
pub fn eval_predicate<'a, F>(p: &Predicate, state: F) -> Result<(f64, Gradient)>
where
    F: Fn(AgentId) -> &'a [f64],
{
    let mut xs = Vec::with_capacity(p.participants.len());
    for &a in &p.participants {
        let x = state(a);
        if let Some(&c) = p.components.iter().find(|&&c| c >= x.len()) {
            return Err(Error::InvalidParameter(format!(
                "component {c} out of range for agent {a} (state dim {})",
                x.len()
            )));
        }
        xs.push(x);
    }
    let mut g = Gradient::new();
    let value = match &p.kind {
        PredicateKind::NormBallRelative { r, d } => {
            let (xi, xj) = (xs[0], xs[1]);
            let (ai, aj) = (p.participants[0], p.participants[1]);
            let mut sq = 0.0;
            for (k, &c) in p.components.iter().enumerate() {
                let z = xi[c] - xj[c] - d[k];
                sq += z * z;
                add_into(&mut g, ai, xi.len(), c, -2.0 * z);
                add_into(&mut g, aj, xj.len(), c, 2.0 * z);
            }
            r * r - sq
        }
        PredicateKind::NormBallAbsolute { r, c: center } => {
            let xi = xs[0];
            let ai = p.participants[0];
            let mut sq = 0.0;
            for (k, &c) in p.components.iter().enumerate() {
                let z = xi[c] - center[k];
                sq += z * z;
                add_into(&mut g, ai, xi.len(), c, -2.0 * z);
            }
            r * r - sq
        }
        PredicateKind::Bound { c_bar } => {
            let mut sq = 0.0;
            for (x, &a) in xs.iter().zip(&p.participants) {
                for &c in &p.components {
                    sq += x[c] * x[c];
                    add_into(&mut g, a, x.len(), c, -2.0 * x[c]);
                }
            }
            c_bar * c_bar - sq
        }
        PredicateKind::Affine { a: coef, b } => {
            let nc = p.components.len();
            let mut v = *b;
            for (pi, (x, &a)) in xs.iter().zip(&p.participants).enumerate() {
                for (k, &c) in p.components.iter().enumerate() {
                    let w = coef[pi * nc + k];
                    v += w * x[c];
                    add_into(&mut g, a, x.len(), c, w);
                }
            }
            v
        }
    };
    Ok((value, g))
}

/// A predicate or its negation; the leaves of a flattened conjunction.
#[derive(Debug, Clone, PartialEq)]
pub struct Literal {
    pub predicate: Predicate,
    pub negated: bool,
}

impl Literal {
    pub fn eval<'a, F>(&self, state: F) -> Result<(f64, Gradient)>
    where
        F: Fn(AgentId) -> &'a [f64],
    {
        let (v, mut g) = eval_predicate(&self.predicate, state)?;
        if self.negated {
            for row in g.values_mut() {
                row.iter_mut().for_each(|x| *x = -*x);
            }
            Ok((-v, g))
        } else {
            Ok((v, g))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NonTemporalFormula {
    True,
    Pred(Predicate),
    NotPred(Predicate),
    And(Vec<NonTemporalFormula>),
}

impl NonTemporalFormula {
    /// Flattened conjuncts; `True` leaves are dropped.
    pub fn literals(&self) -> Vec<Literal> {
        let mut out = Vec::new();
        self.collect(&mut out);
        out
    }

    fn collect(&self, out: &mut Vec<Literal>) {
        match self {
            NonTemporalFormula::True => {}
            NonTemporalFormula::Pred(p) => out.push(Literal {
                predicate: p.clone(),
                negated: false,
            }),
            NonTemporalFormula::NotPred(p) => out.push(Literal {
                predicate: p.clone(),
                negated: true,
            }),
            NonTemporalFormula::And(fs) => fs.iter().for_each(|f| f.collect(out)),
        }
    }

    pub fn participants(&self) -> BTreeSet<AgentId> {
        self.literals()
            .iter()
            .flat_map(|l| l.predicate.participants.iter().copied())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RobustnessMode {
    Exact,
    Smooth { eta: f64 },
}

/// Log-sum-exp lower approximation of `min`, with the softmin weights
/// (which are its gradient).
pub fn smooth_min(values: &[f64], eta: f64) -> (f64, Vec<f64>) {
    if values.is_empty() {
        return (f64::INFINITY, Vec::new());
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let ex: Vec<f64> = values.iter().map(|v| (-eta * (v - lo)).exp()).collect();
    let s: f64 = ex.iter().sum();
    let value = lo - s.ln() / eta;
    (value, ex.into_iter().map(|e| e / s).collect())
}

/// Exact minimum and the index of the first minimizer.
pub fn exact_min(values: &[f64]) -> (f64, Option<usize>) {
    let mut best = (f64::INFINITY, None);
    for (k, &v) in values.iter().enumerate() {
        if v < best.0 {
            best = (v, Some(k));
        }
    }
    best
}

/// Robustness of a non-temporal formula and its gradient. `True` evaluates
/// to `+∞` with an empty gradient.
pub fn robustness<'a, F>(psi: &NonTemporalFormula, state: F, mode: RobustnessMode) -> Result<(f64, Gradient)>
where
    F: Fn(AgentId) -> &'a [f64] + Copy,
{
    let lits = psi.literals();
    let mut vals = Vec::with_capacity(lits.len());
    let mut grads = Vec::with_capacity(lits.len());
    for l in &lits {
        let (v, g) = l.eval(state)?;
        vals.push(v);
        grads.push(g);
    }
    match mode {
        RobustnessMode::Exact => {
            let (v, idx) = exact_min(&vals);
            Ok((v, idx.map(|k| grads.swap_remove(k)).unwrap_or_default()))
        }
        RobustnessMode::Smooth { eta } => {
            if !(eta > 0.0) {
                return Err(Error::InvalidParameter(format!("eta must be positive, got {eta}")));
            }
            let (v, w) = smooth_min(&vals, eta);
            Ok((v, combine_gradients(&grads, &w)))
        }
    }
}

/// `Σ_k w_k ∇_k`, merging per-agent rows.
pub fn combine_gradients(grads: &[Gradient], weights: &[f64]) -> Gradient {
    let mut out = Gradient::new();
    for (g, &w) in grads.iter().zip(weights) {
        for (a, row) in g {
            let e = out.entry(*a).or_insert_with(|| vec![0.0; row.len()]);
            for (o, r) in e.iter_mut().zip(row) {
                *o += w * r;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TemporalOp {
    Always { a: f64, b: f64 },
    Eventually { a: f64, b: f64 },
    /// `F[a_outer, b_outer] G[a_inner, b_inner]`
    EventuallyAlways {
        a_outer: f64,
        b_outer: f64,
        a_inner: f64,
        b_inner: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalFormula {
    pub op: TemporalOp,
    pub body: NonTemporalFormula,
}

fn check_interval(a: f64, b: f64) -> Result<()> {
    if !(a >= 0.0 && a <= b && b.is_finite()) {
        return Err(Error::InvalidParameter(format!("invalid interval [{a}, {b}]")));
    }
    Ok(())
}

impl TemporalFormula {
    pub fn new(op: TemporalOp, body: NonTemporalFormula) -> Result<Self> {
        match op {
            TemporalOp::Always { a, b } | TemporalOp::Eventually { a, b } => check_interval(a, b)?,
            TemporalOp::EventuallyAlways {
                a_outer,
                b_outer,
                a_inner,
                b_inner,
            } => {
                check_interval(a_outer, b_outer)?;
                check_interval(a_inner, b_inner)?;
            }
        }
        Ok(TemporalFormula { op, body })
    }

    /// Last time instant the formula's robustness depends on.
    pub fn horizon(&self) -> f64 {
        match self.op {
            TemporalOp::Always { b, .. } | TemporalOp::Eventually { b, .. } => b,
            TemporalOp::EventuallyAlways { b_outer, b_inner, .. } => b_outer + b_inner,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct TimeWindow {
    pub lo: f64,
    pub hi: f64,
}

impl TimeWindow {
    pub fn contains(&self, t: f64) -> bool {
        t >= self.lo - GRID_TOL && t <= self.hi + GRID_TOL
    }
}

/// Interval over which the body must hold. `t_star` defaults to the end of
/// the outer interval for F and FG.
pub fn time_window(phi: &TemporalFormula, t_star: Option<f64>) -> Result<TimeWindow> {
    let pick = |a: f64, b: f64| -> Result<f64> {
        let t = t_star.unwrap_or(b);
        if t < a || t > b {
            return Err(Error::InvalidParameter(format!("t* = {t} outside [{a}, {b}]")));
        }
        Ok(t)
    };
    match phi.op {
        TemporalOp::Always { a, b } => Ok(TimeWindow { lo: a, hi: b }),
        TemporalOp::Eventually { a, b } => {
            let t = pick(a, b)?;
            Ok(TimeWindow { lo: t, hi: t })
        }
        TemporalOp::EventuallyAlways {
            a_outer,
            b_outer,
            a_inner,
            b_inner,
        } => {
            let t = pick(a_outer, b_outer)?;
            Ok(TimeWindow {
                lo: t + a_inner,
                hi: t + b_inner,
            })
        }
    }
}

/// Grid indices `k` with `lo <= t0 + k·dt <= hi`.
fn index_range(lo: f64, hi: f64, t0: f64, dt: f64) -> (usize, usize) {
    let first = ((lo - t0) / dt - GRID_TOL).ceil().max(0.0) as usize;
    let last = ((hi - t0) / dt + GRID_TOL).floor().max(0.0) as usize;
    (first, last)
}

/// Monitor a sampled robustness signal of the body on a uniform grid
/// starting at `t0` with step `dt`. Returns `(satisfied, margin)`.
pub fn monitor_signal(phi: &TemporalFormula, rho: &[f64], t0: f64, dt: f64) -> Result<(bool, f64)> {
    if rho.is_empty() || !(dt > 0.0) {
        return Err(Error::InsufficientData("empty robustness signal".into()));
    }
    let t_end = t0 + (rho.len() - 1) as f64 * dt;
    if t_end + GRID_TOL * dt.max(1.0) < phi.horizon() {
        return Err(Error::InsufficientData(format!(
            "trajectory ends at {t_end}, formula horizon is {}",
            phi.horizon()
        )));
    }
    let margin = match phi.op {
        TemporalOp::Always { a, b } => {
            let (i, j) = index_range(a, b, t0, dt);
            rho[i..=j].iter().copied().fold(f64::INFINITY, f64::min)
        }
        TemporalOp::Eventually { a, b } => {
            let (i, j) = index_range(a, b, t0, dt);
            rho[i..=j].iter().copied().fold(f64::NEG_INFINITY, f64::max)
        }
        TemporalOp::EventuallyAlways {
            a_outer,
            b_outer,
            a_inner,
            b_inner,
        } => {
            let (k0, k1) = index_range(a_outer, b_outer, t0, dt);
            let ia = (a_inner / dt - GRID_TOL).ceil() as usize;
            let ib = (b_inner / dt + GRID_TOL).floor() as usize;
            // Sliding-window minimum over [k + ia, k + ib] as k advances.
            let mut dq: VecDeque<usize> = VecDeque::new();
            let mut next = k0 + ia;
            let mut best = f64::NEG_INFINITY;
            for k in k0..=k1 {
                let hi = (k + ib).min(rho.len() - 1);
                while next <= hi {
                    while dq.back().is_some_and(|&q| rho[q] >= rho[next]) {
                        dq.pop_back();
                    }
                    dq.push_back(next);
                    next += 1;
                }
                while dq.front().is_some_and(|&q| q < k + ia) {
                    dq.pop_front();
                }
                if let Some(&q) = dq.front() {
                    best = best.max(rho[q]);
                }
            }
            best
        }
    };
    Ok((margin > 0.0, margin))
}

/// States sampled on a uniform time grid: `states[sample][agent index]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampledTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<Vec<f64>>>,
}

impl SampledTrajectory {
    /// Grid step, after checking uniformity.
    pub fn step(&self) -> Result<f64> {
        if self.times.len() < 2 {
            return Err(Error::InsufficientData("need at least two samples".into()));
        }
        let dt = self.times[1] - self.times[0];
        let ok = self
            .times
            .windows(2)
            .all(|w| ((w[1] - w[0]) - dt).abs() <= 1e-6 * dt.abs().max(1e-12));
        if !(dt > 0.0) || !ok {
            return Err(Error::InvalidParameter("time grid is not uniform".into()));
        }
        Ok(dt)
    }
}

/// Monitor a formula against true states using exact-min semantics.
pub fn monitor_trajectory(phi: &TemporalFormula, traj: &SampledTrajectory) -> Result<(bool, f64)> {
    let dt = traj.step()?;
    let mut rho = Vec::with_capacity(traj.times.len());
    for sample in &traj.states {
        let (v, _) = robustness(&phi.body, |a: AgentId| sample[a.idx()].as_slice(), RobustnessMode::Exact)?;
        rho.push(v);
    }
    monitor_signal(phi, &rho, traj.times[0], dt)
}

/// Task participants of `i` that it talks to directly, and those it has to estimate.
pub fn split_state_views(gc: &CommGraph, gt: &TaskGraph, i: AgentId) -> (Vec<AgentId>, Vec<AgentId>) {
    let closed = gc.closed_neighbors(i);
    gt.task_neighbors(i).into_iter().partition(|j| closed.contains(j))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn a(i: usize) -> AgentId {
        AgentId(i)
    }

    fn rel(r: f64) -> Predicate {
        Predicate::new(
            PredicateKind::NormBallRelative { r, d: vec![0.0, 0.0] },
            vec![a(1), a(2)],
            vec![0, 1],
        )
        .unwrap()
    }

    #[test]
    fn relative_ball_value_and_gradient() {
        let xs = [vec![1.0, 0.0], vec![0.0, 0.0]];
        let (v, g) = eval_predicate(&rel(3.0), |id| xs[id.idx()].as_slice()).unwrap();
        assert_abs_diff_eq!(v, 8.0);
        assert_eq!(g[&a(1)], vec![-2.0, 0.0]);
        assert_eq!(g[&a(2)], vec![2.0, 0.0]);
    }

    #[test]
    fn absolute_ball_at_center() {
        let p = Predicate::new(
            PredicateKind::NormBallAbsolute {
                r: 7.05f64.sqrt(),
                c: vec![-1.175, -1.618],
            },
            vec![a(3)],
            vec![0, 1],
        )
        .unwrap();
        let x = [-1.175, -1.618, 0.3];
        let (v, g) = eval_predicate(&p, |_| &x[..]).unwrap();
        assert_abs_diff_eq!(v, 7.05, epsilon = 1e-12);
        assert_eq!(g[&a(3)], vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn dimension_mismatch() {
        let x = [1.0];
        assert!(eval_predicate(&rel(1.0), |_| &x[..]).is_err());
        assert!(Predicate::new(PredicateKind::Bound { c_bar: -1.0 }, vec![a(1)], vec![0]).is_err());
    }

    #[test]
    fn conjunction_modes() {
        let x = [0.0];
        let cst = |b: f64| {
            NonTemporalFormula::Pred(
                Predicate::new(PredicateKind::Affine { a: vec![0.0], b }, vec![a(1)], vec![0]).unwrap(),
            )
        };
        let f = NonTemporalFormula::And(vec![cst(3.0), cst(5.0)]);
        let (v, _) = robustness(&f, |_| &x[..], RobustnessMode::Exact).unwrap();
        assert_eq!(v, 3.0);
        let f = NonTemporalFormula::And(vec![cst(2.0), cst(2.0)]);
        let (v, _) = robustness(&f, |_| &x[..], RobustnessMode::Smooth { eta: 10.0 }).unwrap();
        assert_abs_diff_eq!(v, 2.0 - 2f64.ln() / 10.0, epsilon = 1e-12);
        let neg = NonTemporalFormula::NotPred(
            Predicate::new(PredicateKind::Affine { a: vec![0.0], b: 2.0 }, vec![a(1)], vec![0]).unwrap(),
        );
        let (v, _) = robustness(&neg, |_| &x[..], RobustnessMode::Exact).unwrap();
        assert_eq!(v, -2.0);
        let (v, g) = robustness(&NonTemporalFormula::True, |_| &x[..], RobustnessMode::Exact).unwrap();
        assert_eq!(v, f64::INFINITY);
        assert!(g.is_empty());
    }

    #[test]
    fn smooth_min_survives_large_values() {
        let (v, w) = smooth_min(&[1e6, 1e6 + 1.0], 100.0);
        assert!(v.is_finite());
        assert_abs_diff_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn windows() {
        let body = NonTemporalFormula::True;
        let g = TemporalFormula::new(TemporalOp::Always { a: 4.0, b: 5.0 }, body.clone()).unwrap();
        assert_eq!(time_window(&g, None).unwrap(), TimeWindow { lo: 4.0, hi: 5.0 });
        let f = TemporalFormula::new(TemporalOp::Eventually { a: 2.0, b: 6.0 }, body.clone()).unwrap();
        assert_eq!(time_window(&f, Some(6.0)).unwrap(), TimeWindow { lo: 6.0, hi: 6.0 });
        assert_eq!(time_window(&f, None).unwrap(), TimeWindow { lo: 6.0, hi: 6.0 });
        assert!(time_window(&f, Some(7.0)).is_err());
        let fg = TemporalFormula::new(
            TemporalOp::EventuallyAlways {
                a_outer: 1.0,
                b_outer: 2.0,
                a_inner: 0.5,
                b_inner: 1.5,
            },
            body,
        )
        .unwrap();
        assert_eq!(time_window(&fg, Some(1.0)).unwrap(), TimeWindow { lo: 1.5, hi: 2.5 });
        assert_eq!(fg.horizon(), 3.5);
        assert!(TemporalFormula::new(TemporalOp::Always { a: 2.0, b: 1.0 }, NonTemporalFormula::True).is_err());
    }

    #[test]
    fn monitor_basic_signals() {
        let g = TemporalFormula::new(TemporalOp::Always { a: 0.0, b: 1.0 }, NonTemporalFormula::True).unwrap();
        let f = TemporalFormula::new(TemporalOp::Eventually { a: 0.0, b: 1.0 }, NonTemporalFormula::True).unwrap();
        let dt = 0.01;
        let ones = vec![1.0; 101];
        assert_eq!(monitor_signal(&g, &ones, 0.0, dt).unwrap(), (true, 1.0));
        let ramp: Vec<f64> = (0..=100).map(|k| k as f64 * dt - 0.5).collect();
        let (ok, m) = monitor_signal(&g, &ramp, 0.0, dt).unwrap();
        assert!(!ok);
        assert_abs_diff_eq!(m, -0.5);
        let (ok, m) = monitor_signal(&f, &ramp, 0.0, dt).unwrap();
        assert!(ok);
        assert_abs_diff_eq!(m, 0.5, epsilon = 1e-12);
        assert!(matches!(
            monitor_signal(&g, &ramp[..50], 0.0, dt),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn eventually_always_on_step_signal() {
        // Signal is positive only on [2, 3]; F[0,3] G[0,1] holds with t1 = 2.
        let dt = 0.1;
        let rho: Vec<f64> = (0..=50)
            .map(|k| {
                let t = k as f64 * dt;
                if (2.0 - 1e-9..=3.0 + 1e-9).contains(&t) { 1.0 } else { -1.0 }
            })
            .collect();
        let fg = TemporalFormula::new(
            TemporalOp::EventuallyAlways {
                a_outer: 0.0,
                b_outer: 3.0,
                a_inner: 0.0,
                b_inner: 1.0,
            },
            NonTemporalFormula::True,
        )
        .unwrap();
        assert_eq!(monitor_signal(&fg, &rho, 0.0, dt).unwrap(), (true, 1.0));
    }

    #[test]
    fn views_split() {
        let gc = CommGraph::new(3, [(1, 2), (2, 3)]).unwrap();
        let gt = TaskGraph::new(3, [(1, 3), (2, 2)]).unwrap();
        assert_eq!(split_state_views(&gc, &gt, a(1)), (vec![a(1)], vec![a(3)]));
        assert_eq!(split_state_views(&gc, &gt, a(2)), (vec![a(2)], vec![]));
    }
}
