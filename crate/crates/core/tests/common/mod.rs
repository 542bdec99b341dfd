#![allow(dead_code)]

use hopfunnel_core::CommGraph;
use rand::Rng;

/// Random connected graph: a random spanning tree plus extra edges with probability `p`.
pub fn random_connected<R: Rng>(rng: &mut R, n: usize, p: f64) -> CommGraph {
    let mut edges = Vec::new();
    for v in 2..=n {
        let parent = rng.random_range(1..v);
        edges.push((parent, v));
    }
    for a in 1..=n {
        for b in a + 1..=n {
            if rng.random_bool(p) && !edges.contains(&(a, b)) {
                edges.push((a, b));
            }
        }
    }
    CommGraph::new(n, edges).unwrap()
}

/// Normwise relative error with a floor on the denominator.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-6);
    diff / scale
}

pub fn scenario_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
}
