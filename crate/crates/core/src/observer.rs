//! k-hop prescribed-performance state observer.
//!
//! One [`ObserverBank`] exists per target agent `i` with a nonempty k-hop
//! set. Row `j` of the bank is the estimate `x̂^{N_j}_i` held by estimator
//! `N_j`. Every value an estimator uses is fetched through an
//! [`ExchangeView`], which only serves data from the reader's closed
//! communication neighborhood and records every read.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{induced_matrices, AgentId, CommGraph, InducedMatrices, KHopNeighborhood};
use crate::ppf::{design_observer_funnels, ExpPpf, ObserverFunnelSet, PerformanceFunction};

/// Normalized errors are clamped to `|e| ≤ 1 − E_GUARD`.
pub const E_GUARD: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Breach {
    pub reader: AgentId,
    pub source: AgentId,
    pub item: String,
}

/// Read counter and breach log shared by all views of a run.
#[derive(Debug, Default)]
pub struct LocalityAudit {
    reads: AtomicU64,
    breaches: Mutex<Vec<Breach>>,
}

impl LocalityAudit {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reads(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }

    pub fn breaches(&self) -> Vec<Breach> {
        self.breaches.lock().map(|b| b.clone()).unwrap_or_default()
    }

    pub fn breach_count(&self) -> usize {
        self.breaches.lock().map(|b| b.len()).unwrap_or(0)
    }

    fn record(&self, reader: AgentId, source: AgentId, item: String) -> Error {
        if let Ok(mut b) = self.breaches.lock() {
            b.push(Breach {
                reader,
                source,
                item: item.clone(),
            });
        }
        Error::LocalityBreach {
            reader,
            source_agent: source,
            item,
        }
    }
}

/// Contribution of one task to a participant's input: `∂ρ̄̂/∂x_p · Γ̄⁻¹ J ε`.
#[derive(Debug, Clone, PartialEq)]
pub struct DriveShare {
    pub participant: AgentId,
    pub vector: Vec<f64>,
}

/// Everything agents publish in one exchange round.
#[derive(Debug, Clone, Copy)]
pub struct Snapshot<'a> {
    /// True states by agent index.
    pub states: &'a [Vec<f64>],
    /// Estimates of each target, one row per k-hop member.
    pub estimates: &'a [Vec<Vec<f64>>],
    /// k-hop members of each target, matching the rows of `estimates`.
    pub members: &'a [Vec<AgentId>],
    /// Task drives published by each task owner.
    pub drives: &'a [Vec<DriveShare>],
}

/// Read access of one agent to a snapshot.
#[derive(Clone, Copy)]
pub struct ExchangeView<'a> {
    reader: AgentId,
    gc: &'a CommGraph,
    snap: Snapshot<'a>,
    audit: &'a LocalityAudit,
}

impl<'a> ExchangeView<'a> {
    pub fn new(reader: AgentId, gc: &'a CommGraph, snap: Snapshot<'a>, audit: &'a LocalityAudit) -> Self {
        ExchangeView {
            reader,
            gc,
            snap,
            audit,
        }
    }

    pub fn reader(&self) -> AgentId {
        self.reader
    }

    fn in_scope(&self, source: AgentId) -> bool {
        source == self.reader || self.gc.has_edge(self.reader, source)
    }

    fn guard(&self, source: AgentId, item: impl FnOnce() -> String) -> Result<()> {
        self.audit.reads.fetch_add(1, Ordering::Relaxed);
        if self.in_scope(source) {
            Ok(())
        } else {
            Err(self.audit.record(self.reader, source, item()))
        }
    }

    /// True state published by `source`.
    pub fn state(&self, source: AgentId) -> Result<&'a [f64]> {
        self.guard(source, || format!("state of {source}"))?;
        Ok(&self.snap.states[source.idx()])
    }

    /// True state of `target` relayed by `via`, which must be adjacent to `target`.
    pub fn relayed_state(&self, via: AgentId, target: AgentId) -> Result<&'a [f64]> {
        self.guard(via, || format!("relayed state of {target}"))?;
        if !(via == target || self.gc.has_edge(via, target)) {
            return Err(self
                .audit
                .record(self.reader, via, format!("relay of non-neighbor {target}")));
        }
        Ok(&self.snap.states[target.idx()])
    }

    /// Estimate of `target` held by `source`.
    pub fn estimate(&self, source: AgentId, target: AgentId) -> Result<&'a [f64]> {
        self.guard(source, || format!("estimate of {target}"))?;
        let members = &self.snap.members[target.idx()];
        match members.binary_search(&source) {
            Ok(row) => Ok(&self.snap.estimates[target.idx()][row]),
            Err(_) => Err(Error::InvalidParameter(format!(
                "agent {source} holds no estimate of {target}"
            ))),
        }
    }

    /// Drive published by task owner `source` for this reader.
    pub fn drive_from(&self, source: AgentId) -> Result<Option<&'a [f64]>> {
        self.guard(source, || format!("task drive of {source}"))?;
        Ok(self.snap.drives[source.idx()]
            .iter()
            .find(|d| d.participant == self.reader)
            .map(|d| d.vector.as_slice()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transformed {
    pub value: f64,
    pub jacobian: f64,
    pub clamped: bool,
}

/// `T(e) = ln((1+e)/(1−e))`, `J_T = 2/(1−e²)`, with `e` clamped to the guard band.
pub fn transform(e: f64) -> Transformed {
    let lim = 1.0 - E_GUARD;
    let clamped = !(e.abs() <= lim);
    let e = if e.is_nan() { lim } else { e.clamp(-lim, lim) };
    Transformed {
        value: ((1.0 + e) / (1.0 - e)).ln(),
        jacobian: 2.0 / (1.0 - e * e),
        clamped,
    }
}

/// Per-row, per-component disagreement of one bank.
#[derive(Debug, Clone, PartialEq)]
pub struct Disagreement {
    pub xi: Vec<Vec<f64>>,
    pub e: Vec<Vec<f64>>,
    pub epsilon: Vec<Vec<f64>>,
    pub jacobian: Vec<Vec<f64>>,
    pub clamps: usize,
}

/// Observer state for one target.
#[derive(Debug, Clone)]
pub struct ObserverBank {
    pub target: AgentId,
    pub nbh: KHopNeighborhood,
    pub matrices: InducedMatrices,
    pub funnels: ObserverFunnelSet,
    pub dim: usize,
    /// Per row: communication neighbors of the estimator that also estimate the target.
    pub peers: Vec<Vec<AgentId>>,
    /// Per row: communication neighbors of the estimator adjacent to the target.
    pub relays: Vec<Vec<AgentId>>,
    pub estimates: Vec<Vec<f64>>,
}

impl ObserverBank {
    /// Build the bank of `target`. Returns `Ok(None)` when the k-hop set is empty.
    pub fn new(
        gc: &CommGraph,
        target: AgentId,
        k: usize,
        dim: usize,
        deltas: &[ExpPpf],
        shares: Option<&[f64]>,
    ) -> Result<Option<Self>> {
        let nbh = crate::graph::k_hop_neighbors(gc, target, k)?;
        if nbh.is_empty() {
            return Ok(None);
        }
        let matrices = induced_matrices(gc, &nbh)?;
        let funnels = design_observer_funnels(&matrices, deltas, shares)?;
        let target_nbrs = gc.neighbors(target);
        let mut peers = Vec::with_capacity(nbh.len());
        let mut relays = Vec::with_capacity(nbh.len());
        for &j in &nbh.members {
            peers.push(
                gc.neighbors(j)
                    .iter()
                    .copied()
                    .filter(|v| nbh.position(*v).is_some())
                    .collect(),
            );
            relays.push(
                gc.neighbors(j)
                    .iter()
                    .copied()
                    .filter(|v| target_nbrs.binary_search(v).is_ok())
                    .collect(),
            );
        }
        Ok(Some(ObserverBank {
            target,
            estimates: vec![vec![0.0; dim]; nbh.len()],
            nbh,
            matrices,
            funnels,
            dim,
            peers,
            relays,
        }))
    }

    pub fn rows(&self) -> usize {
        self.nbh.len()
    }

    pub fn rho(&self, row: usize, t: f64) -> f64 {
        self.funnels.rhos[row].value(t)
    }

    pub fn delta(&self, row: usize, t: f64) -> f64 {
        self.funnels.deltas[row].value(t)
    }

    /// Draw estimates around `x` with `|ξ(0)| ≤ fraction·ρ(0)` by sampling the
    /// disagreement directly and mapping it through `M⁻¹`.
    pub fn initialize<R: Rng + ?Sized>(&mut self, x: &[f64], fraction: f64, rng: &mut R) -> Result<()> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "initial disagreement fraction must lie in (0, 1), got {fraction}"
            )));
        }
        let m_inv = self.matrices.inverse()?;
        let n = self.rows();
        for (c, &xc) in x.iter().enumerate().take(self.dim) {
            let xi: Vec<f64> = (0..n)
                .map(|r| {
                    let b = fraction * self.funnels.rhos[r].rho0;
                    rng.random_range(-b..=b)
                })
                .collect();
            for j in 0..n {
                let err: f64 = (0..n).map(|r| m_inv[(j, r)] * xi[r]).sum();
                self.estimates[j][c] = xc + err;
            }
        }
        Ok(())
    }
}

/// Disagreement `ξ` of estimator row `row`, computed from its own view.
pub fn row_disagreement(bank: &ObserverBank, row: usize, view: &ExchangeView<'_>) -> Result<Vec<f64>> {
    let i = bank.target;
    let own = view.estimate(view.reader(), i)?;
    let mut xi = vec![0.0; bank.dim];
    for &l in &bank.peers[row] {
        let other = view.estimate(l, i)?;
        for c in 0..bank.dim {
            xi[c] += own[c] - other[c];
        }
    }
    for &m in &bank.relays[row] {
        let xt = view.relayed_state(m, i)?;
        for c in 0..bank.dim {
            xi[c] += own[c] - xt[c];
        }
    }
    Ok(xi)
}

/// Disagreement of every row at time `t`, each row through its estimator's view.
pub fn disagreement(
    bank: &ObserverBank,
    gc: &CommGraph,
    snap: Snapshot<'_>,
    audit: &LocalityAudit,
    t: f64,
) -> Result<Disagreement> {
    let n = bank.rows();
    let mut out = Disagreement {
        xi: Vec::with_capacity(n),
        e: Vec::with_capacity(n),
        epsilon: Vec::with_capacity(n),
        jacobian: Vec::with_capacity(n),
        clamps: 0,
    };
    for (row, &j) in bank.nbh.members.iter().enumerate() {
        let view = ExchangeView::new(j, gc, snap, audit);
        let xi = row_disagreement(bank, row, &view)?;
        let rho = bank.rho(row, t);
        let e: Vec<f64> = xi.iter().map(|v| v / rho).collect();
        let tr: Vec<Transformed> = e.iter().map(|&v| transform(v)).collect();
        out.clamps += tr.iter().filter(|x| x.clamped).count();
        out.epsilon.push(tr.iter().map(|x| x.value).collect());
        out.jacobian.push(tr.iter().map(|x| x.jacobian).collect());
        out.e.push(e);
        out.xi.push(xi);
    }
    Ok(out)
}

/// `dx̂_j = −ρ_j(t)⁻¹ J_T(e_j) ε_j` per row and component.
pub fn observer_derivative(bank: &ObserverBank, d: &Disagreement, t: f64) -> Vec<Vec<f64>> {
    (0..bank.rows())
        .map(|row| {
            let rho = bank.rho(row, t);
            d.epsilon[row]
                .iter()
                .zip(&d.jacobian[row])
                .map(|(eps, jac)| -jac * eps / rho)
                .collect()
        })
        .collect()
}

/// Advance one bank by a classical RK4 step with the target state held at `x`.
/// Returns the number of clamp events seen in the four stages.
pub fn observer_step(
    bank: &mut ObserverBank,
    gc: &CommGraph,
    x: &[f64],
    t: f64,
    dt: f64,
    audit: &LocalityAudit,
) -> Result<usize> {
    let drives = vec![Vec::new(); gc.n_agents()];
    let mut clamps = 0;
    let n = gc.n_agents();
    let mut states = vec![Vec::new(); n];
    states[bank.target.idx()] = x.to_vec();
    let mut members = vec![Vec::new(); n];
    members[bank.target.idx()] = bank.nbh.members.clone();
    let mut eval = |est: &Vec<Vec<f64>>, tau: f64| -> Result<Vec<Vec<f64>>> {
        let mut estimates = vec![Vec::new(); n];
        estimates[bank.target.idx()] = est.clone();
        let snap = Snapshot {
            states: &states,
            estimates: &estimates,
            members: &members,
            drives: &drives,
        };
        let d = disagreement(bank, gc, snap, audit, tau)?;
        clamps += d.clamps;
        Ok(observer_derivative(bank, &d, tau))
    };
    let y0 = bank.estimates.clone();
    let axpy = |y: &Vec<Vec<f64>>, k: &Vec<Vec<f64>>, h: f64| -> Vec<Vec<f64>> {
        y.iter()
            .zip(k)
            .map(|(a, b)| a.iter().zip(b).map(|(u, v)| u + h * v).collect())
            .collect()
    };
    let k1 = eval(&y0, t)?;
    let k2 = eval(&axpy(&y0, &k1, dt / 2.0), t + dt / 2.0)?;
    let k3 = eval(&axpy(&y0, &k2, dt / 2.0), t + dt / 2.0)?;
    let k4 = eval(&axpy(&y0, &k3, dt), t + dt)?;
    for r in 0..y0.len() {
        for c in 0..y0[r].len() {
            bank.estimates[r][c] = y0[r][c] + dt / 6.0 * (k1[r][c] + 2.0 * k2[r][c] + 2.0 * k3[r][c] + k4[r][c]);
        }
    }
    Ok(clamps)
}

/// Certified bound `Σ_r |(M⁻¹)_{jr}| ρ_r(t)` on each row's estimation error.
pub fn reconstruct_error_bound(bank: &ObserverBank, t: f64) -> Vec<f64> {
    bank.funnels.reconstructed_bounds(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn transform_values() {
        let t0 = transform(0.0);
        assert_eq!((t0.value, t0.jacobian), (0.0, 2.0));
        let t = transform(0.5);
        assert_abs_diff_eq!(t.value, 3f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(t.jacobian, 8.0 / 3.0, epsilon = 1e-12);
        let n = transform(-0.5);
        assert_abs_diff_eq!(n.value, -3f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(n.jacobian, 8.0 / 3.0, epsilon = 1e-12);
        let c = transform(1.0);
        assert!(c.clamped && c.value.is_finite());
        assert!(!transform(0.999).clamped);
    }

    #[test]
    fn composed_derivative_value() {
        let tr = transform(0.5);
        assert_abs_diff_eq!(-(1.0 / 2.0) * tr.jacobian * tr.value, -1.46482, epsilon = 1e-5);
    }

    /// Path 1-2-3-4 observed from agent 1 with k = 3: members {3, 4},
    /// M = [[2,-1],[-1,1]] after relabeling (3 has the shared neighbor 2).
    fn path_bank() -> (CommGraph, ObserverBank) {
        let gc = CommGraph::new(4, [(1, 2), (2, 3), (3, 4)]).unwrap();
        let d = ExpPpf::constant(6.0);
        let bank = ObserverBank::new(&gc, AgentId(1), 3, 1, &[d, d], None).unwrap().unwrap();
        (gc, bank)
    }

    fn run_disagreement(gc: &CommGraph, bank: &ObserverBank, x: f64) -> Disagreement {
        let states = vec![vec![x], vec![0.0], vec![0.0], vec![0.0]];
        let mut estimates = vec![Vec::new(); 4];
        estimates[0] = bank.estimates.clone();
        let mut members = vec![Vec::new(); 4];
        members[0] = bank.nbh.members.clone();
        let drives = vec![Vec::new(); 4];
        let snap = Snapshot {
            states: &states,
            estimates: &estimates,
            members: &members,
            drives: &drives,
        };
        let audit = LocalityAudit::new();
        let d = disagreement(bank, gc, snap, &audit, 0.0).unwrap();
        assert_eq!(audit.breach_count(), 0);
        d
    }

    #[test]
    fn disagreement_matches_matrix_form() {
        let (gc, mut bank) = path_bank();
        assert_eq!(bank.matrices.m, DMatrix::from_row_slice(2, 2, &[2., -1., -1., 1.]));
        bank.estimates = vec![vec![1.5], vec![0.5]];
        let d = run_disagreement(&gc, &bank, 0.5);
        assert_abs_diff_eq!(d.xi[0][0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d.xi[1][0], -1.0, epsilon = 1e-12);
        bank.estimates = vec![vec![0.5], vec![0.5]];
        let d = run_disagreement(&gc, &bank, 0.5);
        assert_eq!(d.xi, vec![vec![0.0], vec![0.0]]);
    }

    #[test]
    fn single_member_disagreement() {
        let gc = CommGraph::new(3, [(1, 2), (2, 3)]).unwrap();
        let mut bank = ObserverBank::new(&gc, AgentId(1), 2, 1, &[ExpPpf::constant(1.0)], None)
            .unwrap()
            .unwrap();
        bank.estimates = vec![vec![2.25]];
        let states = vec![vec![1.0], vec![0.0], vec![0.0]];
        let estimates = vec![bank.estimates.clone(), vec![], vec![]];
        let members = vec![bank.nbh.members.clone(), vec![], vec![]];
        let drives = vec![Vec::new(); 3];
        let snap = Snapshot {
            states: &states,
            estimates: &estimates,
            members: &members,
            drives: &drives,
        };
        let d = disagreement(&bank, &gc, snap, &LocalityAudit::new(), 0.0).unwrap();
        assert_abs_diff_eq!(d.xi[0][0], 1.25);
    }

    #[test]
    fn out_of_scope_read_is_a_breach() {
        let (gc, _) = path_bank();
        let states = vec![vec![0.0]; 4];
        let estimates = vec![Vec::new(); 4];
        let members = vec![Vec::new(); 4];
        let drives = vec![Vec::new(); 4];
        let snap = Snapshot {
            states: &states,
            estimates: &estimates,
            members: &members,
            drives: &drives,
        };
        let audit = LocalityAudit::new();
        let view = ExchangeView::new(AgentId(4), &gc, snap, &audit);
        assert!(view.state(AgentId(3)).is_ok());
        assert!(matches!(view.state(AgentId(1)), Err(Error::LocalityBreach { .. })));
        assert!(view.relayed_state(AgentId(3), AgentId(1)).is_err());
        assert_eq!(audit.breach_count(), 2);
        assert_eq!(audit.reads(), 3);
    }

    #[test]
    fn stationary_at_consensus() {
        let (gc, mut bank) = path_bank();
        bank.estimates = vec![vec![0.7], vec![0.7]];
        let audit = LocalityAudit::new();
        observer_step(&mut bank, &gc, &[0.7], 0.0, 1e-3, &audit).unwrap();
        assert_eq!(bank.estimates, vec![vec![0.7], vec![0.7]]);
    }

    #[test]
    fn estimates_stay_inside_shrinking_funnels() {
        let gc = CommGraph::new(4, [(1, 2), (2, 3), (3, 4)]).unwrap();
        let d = ExpPpf::new(6.0, 0.06, 2.0).unwrap();
        let mut bank = ObserverBank::new(&gc, AgentId(1), 3, 1, &[d, d], None).unwrap().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        bank.initialize(&[1.0], 0.9, &mut rng).unwrap();
        let audit = LocalityAudit::new();
        let m = bank.matrices.m.clone();
        let mut t = 0.0;
        for _ in 0..3000 {
            let clamps = observer_step(&mut bank, &gc, &[1.0], t, 1e-3, &audit).unwrap();
            assert_eq!(clamps, 0);
            t += 1e-3;
            let err: Vec<f64> = bank.estimates.iter().map(|e| e[0] - 1.0).collect();
            for r in 0..2 {
                let xi = m[(r, 0)] * err[0] + m[(r, 1)] * err[1];
                assert!(xi.abs() < bank.rho(r, t));
                assert!(err[r].abs() < bank.delta(r, t));
            }
        }
        assert!(bank.estimates.iter().all(|e| (e[0] - 1.0).abs() < 0.06));
        assert_eq!(audit.breach_count(), 0);
    }

    #[test]
    fn bounds_from_design() {
        let (_, bank) = path_bank();
        let b = reconstruct_error_bound(&bank, 0.0);
        assert_abs_diff_eq!(b[1], 6.0, epsilon = 1e-12);
        let gc = CommGraph::new(3, [(1, 2), (2, 3), (1, 3)]).unwrap();
        assert!(ObserverBank::new(&gc, AgentId(1), 2, 1, &[], None).unwrap().is_none());
    }
}
