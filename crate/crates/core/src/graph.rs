//! Communication and task graphs, k-hop neighborhoods, induced matrices and
//! cluster decomposition.
//!
//! Agents are identified by 1-based [`AgentId`]s. Every set returned here is
//! sorted ascending so that matrix rows line up with neighborhood members
//! deterministically.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use std::fmt;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used for the positive-definiteness check on `M`.
pub const PD_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentId(pub usize);

impl AgentId {
    /// Zero-based index into per-agent vectors.
    pub fn idx(self) -> usize {
        self.0 - 1
    }

    pub fn from_idx(idx: usize) -> Self {
        AgentId(idx + 1)
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<usize> for AgentId {
    fn from(v: usize) -> Self {
        AgentId(v)
    }
}

fn check_agent(n: usize, a: usize) -> Result<()> {
    if a == 0 || a > n {
        return Err(Error::InvalidParameter(format!(
            "agent id {a} outside 1..={n}"
        )));
    }
    Ok(())
}

/// Undirected communication graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommGraph {
    n_agents: usize,
    edges: BTreeSet<(AgentId, AgentId)>,
    adj: Vec<Vec<AgentId>>,
}

impl CommGraph {
    pub fn new<I>(n_agents: usize, edges: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            check_agent(n_agents, a)?;
            check_agent(n_agents, b)?;
            if a == b {
                return Err(Error::InvalidParameter(format!(
                    "communication self-loop at agent {a}"
                )));
            }
            set.insert((AgentId(a.min(b)), AgentId(a.max(b))));
        }
        let mut adj = vec![Vec::new(); n_agents];
        for &(a, b) in &set {
            adj[a.idx()].push(b);
            adj[b.idx()].push(a);
        }
        for row in &mut adj {
            row.sort();
        }
        Ok(CommGraph {
            n_agents,
            edges: set,
            adj,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn agents(&self) -> impl Iterator<Item = AgentId> {
        (1..=self.n_agents).map(AgentId)
    }

    /// Edges as `(min, max)` pairs.
    pub fn edges(&self) -> &BTreeSet<(AgentId, AgentId)> {
        &self.edges
    }

    /// Open 1-hop neighborhood, sorted.
    pub fn neighbors(&self, i: AgentId) -> &[AgentId] {
        &self.adj[i.idx()]
    }

    /// Closed neighborhood (the agent itself plus its neighbors).
    pub fn closed_neighbors(&self, i: AgentId) -> BTreeSet<AgentId> {
        let mut s: BTreeSet<AgentId> = self.adj[i.idx()].iter().copied().collect();
        s.insert(i);
        s
    }

    pub fn has_edge(&self, a: AgentId, b: AgentId) -> bool {
        self.edges.contains(&(a.min(b), a.max(b)))
    }

    /// BFS hop distances from `i`; `None` for unreachable agents.
    pub fn distances_from(&self, i: AgentId) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.n_agents];
        let mut queue = VecDeque::new();
        dist[i.idx()] = Some(0);
        queue.push_back(i);
        while let Some(u) = queue.pop_front() {
            let du = dist[u.idx()].unwrap_or(0);
            for &v in &self.adj[u.idx()] {
                if dist[v.idx()].is_none() {
                    dist[v.idx()] = Some(du + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    pub fn is_connected(&self) -> bool {
        if self.n_agents == 0 {
            return true;
        }
        self.distances_from(AgentId(1)).iter().all(Option::is_some)
    }
}

/// Directed task-dependency graph. Edge `(i, j)` means the task of `i`
/// depends on the state of `j`. Self-loops mark individual tasks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskGraph {
    n_agents: usize,
    edges: BTreeSet<(AgentId, AgentId)>,
}

impl TaskGraph {
    pub fn new<I>(n_agents: usize, edges: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            check_agent(n_agents, a)?;
            check_agent(n_agents, b)?;
            set.insert((AgentId(a), AgentId(b)));
        }
        Ok(TaskGraph {
            n_agents,
            edges: set,
        })
    }

    pub fn empty(n_agents: usize) -> Self {
        TaskGraph {
            n_agents,
            edges: BTreeSet::new(),
        }
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn edges(&self) -> &BTreeSet<(AgentId, AgentId)> {
        &self.edges
    }

    /// Task participants of agent `i`: `i` itself plus every agent it depends on.
    pub fn task_neighbors(&self, i: AgentId) -> BTreeSet<AgentId> {
        let mut s: BTreeSet<AgentId> = self
            .edges
            .range((i, AgentId(0))..=(i, AgentId(usize::MAX)))
            .map(|&(_, j)| j)
            .collect();
        s.insert(i);
        s
    }

    /// A directed cycle (ignoring self-loops), if any.
    pub fn find_cycle(&self) -> Option<Vec<AgentId>> {
        let n = self.n_agents;
        let mut out = vec![Vec::new(); n];
        for &(a, b) in &self.edges {
            if a != b {
                out[a.idx()].push(b.idx());
            }
        }
        // 0 = unvisited, 1 = on stack, 2 = done
        let mut state = vec![0u8; n];
        let mut parent = vec![usize::MAX; n];
        for root in 0..n {
            if state[root] != 0 {
                continue;
            }
            let mut stack = vec![(root, 0usize)];
            state[root] = 1;
            while let Some(&mut (u, ref mut next)) = stack.last_mut() {
                if *next < out[u].len() {
                    let v = out[u][*next];
                    *next += 1;
                    match state[v] {
                        0 => {
                            state[v] = 1;
                            parent[v] = u;
                            stack.push((v, 0));
                        }
                        1 => {
                            let mut cycle = vec![AgentId::from_idx(v)];
                            let mut w = u;
                            while w != v {
                                cycle.push(AgentId::from_idx(w));
                                w = parent[w];
                            }
                            cycle.reverse();
                            return Some(cycle);
                        }
                        _ => {}
                    }
                } else {
                    state[u] = 2;
                    stack.pop();
                }
            }
        }
        None
    }

    pub fn is_acyclic(&self) -> bool {
        self.find_cycle().is_none()
    }
}

/// Agents at hop distance `2..=k` from `owner`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct KHopNeighborhood {
    pub owner: AgentId,
    pub k: usize,
    pub members: Vec<AgentId>,
}

impl KHopNeighborhood {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Row index of `agent` inside the induced matrices.
    pub fn position(&self, agent: AgentId) -> Option<usize> {
        self.members.binary_search(&agent).ok()
    }
}

pub fn k_hop_neighbors(g: &CommGraph, i: AgentId, k: usize) -> Result<KHopNeighborhood> {
    if k < 2 {
        return Err(Error::InvalidParameter(format!("k must be >= 2, got {k}")));
    }
    check_agent(g.n_agents(), i.0)?;
    let members = g
        .distances_from(i)
        .iter()
        .enumerate()
        .filter_map(|(idx, d)| match d {
            Some(d) if *d >= 2 && *d <= k => Some(AgentId::from_idx(idx)),
            _ => None,
        })
        .collect();
    Ok(KHopNeighborhood {
        owner: i,
        k,
        members,
    })
}

/// `L`, `H` and `M = L + H` of a k-hop induced subgraph.
#[derive(Debug, Clone, PartialEq)]
pub struct InducedMatrices {
    pub l: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub m: DMatrix<f64>,
}

impl InducedMatrices {
    pub fn from_m(m: DMatrix<f64>) -> Self {
        let n = m.nrows();
        InducedMatrices {
            l: DMatrix::zeros(n, n),
            h: DMatrix::zeros(n, n),
            m,
        }
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = SymmetricEigen::new(self.m.clone())
            .eigenvalues
            .iter()
            .copied()
            .collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    pub fn lambda_min(&self) -> f64 {
        self.eigenvalues().first().copied().unwrap_or(f64::NAN)
    }

    pub fn lambda_max(&self) -> f64 {
        self.eigenvalues().last().copied().unwrap_or(f64::NAN)
    }

    pub fn inverse(&self) -> Result<DMatrix<f64>> {
        self.m.clone().try_inverse().ok_or_else(|| {
            Error::AssumptionViolation("induced matrix M is singular".to_string())
        })
    }
}

pub fn induced_matrices(g: &CommGraph, nbh: &KHopNeighborhood) -> Result<InducedMatrices> {
    if nbh.is_empty() {
        return Err(Error::EmptyNeighborhood(nbh.owner));
    }
    let n = nbh.len();
    let mut l = DMatrix::<f64>::zeros(n, n);
    let mut h = DMatrix::<f64>::zeros(n, n);
    let owner_nbrs: BTreeSet<AgentId> = g.neighbors(nbh.owner).iter().copied().collect();
    for (a, &ja) in nbh.members.iter().enumerate() {
        for &v in g.neighbors(ja) {
            if let Some(b) = nbh.position(v) {
                l[(a, b)] -= 1.0;
                l[(a, a)] += 1.0;
            }
        }
        let shared = g
            .neighbors(ja)
            .iter()
            .filter(|v| owner_nbrs.contains(v))
            .count();
        h[(a, a)] = shared as f64;
    }
    let m = &l + &h;
    Ok(InducedMatrices { l, h, m })
}

/// Smallest eigenvalue of `M`; fails unless it exceeds [`PD_TOLERANCE`].
pub fn min_eigenvalue_check(m: &InducedMatrices) -> Result<f64> {
    let lmin = m.lambda_min();
    if !(lmin > PD_TOLERANCE) {
        return Err(Error::AssumptionViolation(format!(
            "lambda_min(M) = {lmin:e} is not positive"
        )));
    }
    Ok(lmin)
}

/// Largest hop distance between an agent and a task participant it cannot
/// talk to directly. Zero when every task neighbor is a communication neighbor.
pub fn min_required_k(gc: &CommGraph, gt: &TaskGraph) -> usize {
    let mut k = 0;
    for i in gc.agents() {
        let closed = gc.closed_neighbors(i);
        let mismatch: Vec<AgentId> = gt
            .task_neighbors(i)
            .into_iter()
            .filter(|j| !closed.contains(j))
            .collect();
        if mismatch.is_empty() {
            continue;
        }
        let dist = gc.distances_from(i);
        for j in mismatch {
            if let Some(d) = dist[j.idx()] {
                k = k.max(d);
            }
        }
    }
    k
}

/// Connected components of the communication/task intersection graph and
/// the directed graph they induce.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClusterDecomposition {
    /// Members of each cluster, ordered by smallest member.
    pub clusters: Vec<Vec<AgentId>>,
    /// `(l, j)`: some agent of cluster `l` has a task depending on cluster `j`.
    pub cluster_edges: Vec<(usize, usize)>,
    /// Cluster indices, leaves first.
    pub topo_order: Vec<usize>,
    #[serde(skip)]
    membership: Vec<usize>,
}

impl ClusterDecomposition {
    pub fn cluster_of(&self, a: AgentId) -> usize {
        self.membership[a.idx()]
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    /// Clusters without outgoing edges.
    pub fn leaves(&self) -> Vec<usize> {
        (0..self.clusters.len())
            .filter(|&c| !self.cluster_edges.iter().any(|&(l, _)| l == c))
            .collect()
    }
}

fn intersection_components(gc: &CommGraph, gt: &TaskGraph) -> (Vec<Vec<AgentId>>, Vec<usize>) {
    let n = gc.n_agents();
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in gt.edges() {
        if a != b && gc.has_edge(a, b) {
            adj[a.idx()].push(b.idx());
            adj[b.idx()].push(a.idx());
        }
    }
    let mut membership = vec![usize::MAX; n];
    let mut clusters = Vec::new();
    for root in 0..n {
        if membership[root] != usize::MAX {
            continue;
        }
        let c = clusters.len();
        let mut members = vec![];
        let mut queue = VecDeque::from([root]);
        membership[root] = c;
        while let Some(u) = queue.pop_front() {
            members.push(AgentId::from_idx(u));
            for &v in &adj[u] {
                if membership[v] == usize::MAX {
                    membership[v] = c;
                    queue.push_back(v);
                }
            }
        }
        members.sort();
        clusters.push(members);
    }
    (clusters, membership)
}

pub fn cluster_decomposition(gc: &CommGraph, gt: &TaskGraph) -> Result<ClusterDecomposition> {
    if gc.n_agents() != gt.n_agents() {
        return Err(Error::InvalidParameter(
            "communication and task graphs disagree on agent count".to_string(),
        ));
    }
    if let Some(cycle) = gt.find_cycle() {
        return Err(Error::AssumptionViolation(format!(
            "task graph has a cycle through agents {cycle:?}"
        )));
    }
    let (clusters, membership) = intersection_components(gc, gt);
    let edges: BTreeSet<(usize, usize)> = gt
        .edges()
        .iter()
        .map(|&(a, b)| (membership[a.idx()], membership[b.idx()]))
        .filter(|(l, j)| l != j)
        .collect();
    let nc = clusters.len();

    // Leaves first: a cluster is ready once every cluster it points to is placed.
    let mut pending_out = vec![0usize; nc];
    let mut incoming = vec![Vec::new(); nc];
    for &(l, j) in &edges {
        pending_out[l] += 1;
        incoming[j].push(l);
    }
    let mut heap: BinaryHeap<Reverse<usize>> = (0..nc)
        .filter(|&c| pending_out[c] == 0)
        .map(Reverse)
        .collect();
    let mut topo = Vec::with_capacity(nc);
    while let Some(Reverse(c)) = heap.pop() {
        topo.push(c);
        for &l in &incoming[c] {
            pending_out[l] -= 1;
            if pending_out[l] == 0 {
                heap.push(Reverse(l));
            }
        }
    }
    if topo.len() != nc {
        return Err(Error::AssumptionViolation(
            "cluster-induced graph contains a cycle".to_string(),
        ));
    }
    Ok(ClusterDecomposition {
        clusters,
        cluster_edges: edges.into_iter().collect(),
        topo_order: topo,
        membership,
    })
}

/// Outcome of the structural assumption checks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AssumptionReport {
    pub comm_connected: bool,
    pub task_acyclic: bool,
    pub task_cycle: Option<Vec<AgentId>>,
    pub intra_cluster_communication: bool,
    /// `(agent, task neighbor)` pairs inside one cluster that do not communicate.
    pub intra_cluster_gaps: Vec<(AgentId, AgentId)>,
}

impl AssumptionReport {
    pub fn all_pass(&self) -> bool {
        self.comm_connected && self.task_acyclic && self.intra_cluster_communication
    }
}

pub fn check_assumptions(
    gc: &CommGraph,
    gt: &TaskGraph,
    dec: &ClusterDecomposition,
) -> AssumptionReport {
    let task_cycle = gt.find_cycle();
    let mut gaps = Vec::new();
    for cluster in &dec.clusters {
        let in_cluster: BTreeSet<AgentId> = cluster.iter().copied().collect();
        for &a in cluster {
            let closed = gc.closed_neighbors(a);
            for j in gt.task_neighbors(a) {
                if in_cluster.contains(&j) && !closed.contains(&j) {
                    gaps.push((a, j));
                }
            }
        }
    }
    AssumptionReport {
        comm_connected: gc.is_connected(),
        task_acyclic: task_cycle.is_none(),
        task_cycle,
        intra_cluster_communication: gaps.is_empty(),
        intra_cluster_gaps: gaps,
    }
}

/// k-hop neighborhoods of every agent, keyed by agent.
pub fn all_k_hop(g: &CommGraph, k: usize) -> Result<BTreeMap<AgentId, KHopNeighborhood>> {
    g.agents()
        .map(|i| k_hop_neighbors(g, i, k).map(|n| (i, n)))
        .collect()
}
