mod common;

use std::time::Instant;

use hopfunnel_core::graph::all_k_hop;
use hopfunnel_core::{
    check_assumptions, cluster_decomposition, induced_matrices, k_hop_neighbors, AgentId, CommGraph, TaskGraph,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn induced_matrix_positive_definite_on_random_graphs() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    for _ in 0..200 {
        let n = rng.random_range(2..=12);
        let p = rng.random_range(0.0..0.4);
        let g = common::random_connected(&mut rng, n, p);
        let k = rng.random_range(2..=3);
        for (_, nbh) in all_k_hop(&g, k).unwrap() {
            if nbh.is_empty() {
                continue;
            }
            let m = induced_matrices(&g, &nbh).unwrap();
            assert!(m.lambda_min() > 1e-9, "λ_min = {} for {:?}", m.lambda_min(), nbh);
            checked += 1;
        }
    }
    assert!(checked > 200);
    assert!(start.elapsed().as_secs_f64() < 10.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn laplacian_rows_sum_to_zero(seed in any::<u64>(), n in 3usize..12, k in 2usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = common::random_connected(&mut rng, n, 0.2);
        for (i, nbh) in all_k_hop(&g, k).unwrap() {
            if nbh.is_empty() {
                continue;
            }
            let m = induced_matrices(&g, &nbh).unwrap();
            for r in 0..m.dim() {
                let s: f64 = m.l.row(r).iter().sum();
                prop_assert!(s.abs() < 1e-12);
                // H counts the members' direct links to the owner's neighbours.
                let member = nbh.members[r];
                let hits = g.neighbors(member).iter().filter(|a| g.has_edge(i, **a)).count();
                prop_assert_eq!(m.h[(r, r)], hits as f64);
            }
            prop_assert_eq!(&m.m, &(&m.l + &m.h));
            prop_assert!(m.inverse().unwrap().iter().all(|v| *v >= -1e-12));
        }
    }

    #[test]
    fn k_hop_members_are_at_distance_two_to_k(seed in any::<u64>(), n in 2usize..12, k in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = common::random_connected(&mut rng, n, 0.15);
        for i in g.agents() {
            let nbh = k_hop_neighbors(&g, i, k).unwrap();
            let d = g.distances_from(i);
            for a in g.agents() {
                let within = matches!(d[a.idx()], Some(h) if h >= 2 && h <= k);
                prop_assert_eq!(nbh.position(a).is_some(), within);
            }
        }
    }

    #[test]
    fn clusters_partition_agents_and_order_is_topological(seed in any::<u64>(), n in 3usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = common::random_connected(&mut rng, n, 0.2);
        // Tasks only along a forward order, so the task graph is acyclic.
        let mut tasks = Vec::new();
        for a in 1..n {
            if rng.random_bool(0.5) {
                tasks.push((a, rng.random_range(a + 1..=n)));
            }
        }
        let gt = TaskGraph::new(n, tasks).unwrap();
        // An acyclic task graph can still induce a cyclic cluster graph.
        let dec = match cluster_decomposition(&g, &gt) {
            Ok(d) => d,
            Err(hopfunnel_core::Error::AssumptionViolation(_)) => return Ok(()),
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        let mut seen: Vec<AgentId> = dec.clusters.iter().flatten().copied().collect();
        seen.sort();
        prop_assert_eq!(seen, g.agents().collect::<Vec<_>>());
        let rank: Vec<usize> = {
            let mut r = vec![0; dec.len()];
            for (pos, c) in dec.topo_order.iter().enumerate() {
                r[*c] = pos;
            }
            r
        };
        // Leaves come first: a cluster is handled after every cluster it depends on.
        for &(a, b) in &dec.cluster_edges {
            prop_assert!(rank[b] < rank[a], "edge {a}->{b} violates order {:?}", dec.topo_order);
        }
        let rep = check_assumptions(&g, &gt, &dec);
        prop_assert!(rep.comm_connected && rep.task_acyclic);
    }
}

#[test]
fn fig2_clusters() {
    let g = CommGraph::new(6, [(1, 2), (2, 6), (3, 4), (4, 5), (2, 4)]).unwrap();
    let gt = TaskGraph::new(6, [(1, 2), (2, 3), (4, 3), (5, 4), (6, 2)]).unwrap();
    let dec = cluster_decomposition(&g, &gt).unwrap();
    let ids = |c: &Vec<AgentId>| c.iter().map(|a| a.0).collect::<Vec<_>>();
    let mut clusters: Vec<Vec<usize>> = dec.clusters.iter().map(ids).collect();
    clusters.sort();
    assert_eq!(clusters, vec![vec![1, 2, 6], vec![3, 4, 5]]);
    let first = &dec.clusters[dec.topo_order[0]];
    assert_eq!(ids(first), vec![3, 4, 5]);
}
