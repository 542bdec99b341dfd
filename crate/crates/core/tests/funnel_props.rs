mod common;

use hopfunnel_core::graph::all_k_hop;
use hopfunnel_core::observer::transform;
use hopfunnel_core::ppf::{
    abs_inverse, norm_within, ppf_norm, rho_t_normball, rows_within, FunnelMargins, Penalty,
};
use hopfunnel_core::stl::TimeWindow;
use hopfunnel_core::{
    build_task_funnel, design_observer_funnels, induced_matrices, task_error, AgentId, Error, ExpPpf,
    InducedMatrices,
};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Induced matrices of every nonempty k-hop set of a batch of random graphs.
fn random_matrices(seed: u64, graphs: usize) -> Vec<InducedMatrices> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for _ in 0..graphs {
        let n = rng.random_range(3..=12);
        let p = rng.random_range(0.0..0.4);
        let g = common::random_connected(&mut rng, n, p);
        let k = rng.random_range(2..=3);
        for (_, nbh) in all_k_hop(&g, k).unwrap() {
            if !nbh.is_empty() {
                out.push(induced_matrices(&g, &nbh).unwrap());
            }
        }
    }
    out
}

#[test]
fn norm_boundary_vectors_satisfy_row_constraints() {
    let mats = random_matrices(3, 200);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut violations = 0;
    for s in 0..1000 {
        let m = &mats[s % mats.len()];
        let n = m.dim();
        let delta: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..5.0)).collect();
        let dmin = delta.iter().copied().fold(f64::INFINITY, f64::min);
        let lmin = m.lambda_min();
        // Nonnegative direction scaled onto ‖ρ‖ = λ_min · min δ.
        let dir: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let len = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        let rho: Vec<f64> = dir.iter().map(|v| v / len * lmin * dmin).collect();
        assert!(norm_within(lmin, &rho, &delta, 1e-9));
        if !rows_within(&abs_inverse(m).unwrap(), &rho, &delta, 1e-9) {
            violations += 1;
        }
    }
    assert_eq!(violations, 0);
}

#[test]
fn row_constraints_are_strictly_weaker_than_norm_constraint() {
    let m = InducedMatrices::from_m(DMatrix::identity(2, 2));
    let rho = [1.9, 1.9];
    let delta = [2.0, 2.0];
    assert!(!norm_within(1.0, &rho, &delta, 0.0));
    assert!(rows_within(&abs_inverse(&m).unwrap(), &rho, &delta, 0.0));
}

#[test]
fn designed_funnels_hold_row_wise_and_are_tight() {
    let mats = random_matrices(5, 40);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for m in &mats {
        let n = m.dim();
        let l = 0.5;
        let deltas: Vec<ExpPpf> = (0..n)
            .map(|_| {
                let inf = rng.random_range(0.2..1.0);
                ExpPpf::new(inf + rng.random_range(0.0..8.0), inf, l).unwrap()
            })
            .collect();
        let shares: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
        let set = design_observer_funnels(m, &deltas, Some(&shares)).unwrap();
        for k in 0..1000 {
            let t = 20.0 * k as f64 / 999.0;
            assert!(set.worst_row_slack(t) <= 1e-9 * (1.0 + deltas[0].rho0), "row constraint broken at t = {t}");
        }
        let b = set.reconstructed_bounds(0.0);
        let j = set.tight_row;
        assert!((b[j] - deltas[j].rho0).abs() <= 1e-9 * deltas[j].rho0);
        // Shares fix the ratios between rows of ρ.
        for r in 1..n {
            let ratio = set.rhos[r].rho0 / set.rhos[0].rho0;
            assert!((ratio - shares[r] / shares[0]).abs() < 1e-12);
        }
    }
}

#[test]
fn mixed_decay_rates_are_rejected() {
    let m = InducedMatrices::from_m(DMatrix::identity(2, 2));
    let deltas = [ExpPpf::new(2.0, 1.0, 0.5).unwrap(), ExpPpf::new(2.0, 1.0, 0.7).unwrap()];
    assert!(matches!(
        design_observer_funnels(&m, &deltas, None),
        Err(Error::InvalidParameter(_))
    ));
}

#[test]
fn normball_penalty_arithmetic() {
    let d = ppf_norm(&[ExpPpf::constant(0.5)]).unwrap();
    let p = rho_t_normball(AgentId(3), d, 3.0).unwrap();
    assert!((p.value(0.0) - 2.75).abs() < 1e-15);
    let too_big = ppf_norm(&[ExpPpf::constant(3.0)]).unwrap();
    assert!(matches!(
        rho_t_normball(AgentId(3), too_big, 3.0),
        Err(Error::InfeasibleRelaxation(_))
    ));
}

/// Sample `e` uniformly from the open ball of radius `delta` in the plane.
fn ball_sample<R: Rng>(rng: &mut R, delta: f64) -> [f64; 2] {
    let r = delta * rng.random_range(0.0f64..1.0).sqrt();
    let a = rng.random_range(0.0..std::f64::consts::TAU);
    [r * a.cos(), r * a.sin()]
}

#[test]
fn penalized_estimate_implies_true_satisfaction() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut positive, mut counterexamples) = (0, 0);
    for _ in 0..100 {
        let r: f64 = rng.random_range(0.5..10.0);
        let delta = rng.random_range(0.01..0.99) * r;
        let pen = rho_t_normball(AgentId(2), ppf_norm(&[ExpPpf::constant(delta)]).unwrap(), r)
            .unwrap()
            .value(0.0);
        // Relative offset with length near the radius, where the implication is tight.
        let dist = rng.random_range((r - 2.0 * delta).max(0.0)..r + delta);
        let ang = rng.random_range(0.0..std::f64::consts::TAU);
        let z = [dist * ang.cos(), dist * ang.sin()];
        for _ in 0..10_000 {
            let e = ball_sample(&mut rng, delta);
            let rho_true = r * r - (z[0] * z[0] + z[1] * z[1]);
            let zh = [z[0] + e[0], z[1] + e[1]];
            let rho_hat = r * r - (zh[0] * zh[0] + zh[1] * zh[1]);
            if rho_hat - pen > 0.0 {
                positive += 1;
                if rho_true <= 0.0 {
                    counterexamples += 1;
                }
            }
        }
    }
    assert_eq!(counterexamples, 0);
    assert!(positive > 10_000, "too few informative draws: {positive}");
}

#[test]
fn transform_is_odd_with_jacobian_at_least_two() {
    for k in -999..=999 {
        let e = k as f64 / 1000.0;
        let (a, b) = (transform(e), transform(-e));
        assert!((a.value + b.value).abs() < 1e-12);
        assert!(a.jacobian >= 2.0 && (a.jacobian - b.jacobian).abs() < 1e-9 * a.jacobian);
        assert!(!a.clamped);
    }
    assert!(transform(1.0).clamped && transform(f64::NAN).clamped);
}

#[test]
fn task_error_jacobian_bounded_below() {
    for k in 1..1000 {
        let e = -(k as f64) / 1000.0;
        let te = task_error(e, 0.0, 1.0);
        assert!(te.jacobian >= 4.0 - 1e-12);
        assert!(!te.clamped);
        // ε vanishes at the funnel middle and is odd around it.
        let mirror = task_error(-1.0 - e, 0.0, 1.0);
        assert!((te.epsilon + mirror.epsilon).abs() < 1e-9);
    }
    assert!(task_error(0.5, 0.0, 1.0).clamped);
}

fn window(lo: f64, hi: f64) -> TimeWindow {
    TimeWindow { lo, hi }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn built_funnel_contains_initial_robustness(
        rho_max in 1.0f64..50.0,
        gap_frac in 0.01f64..0.99,
        pos in 0.05f64..1.0,
        lo in 0.5f64..5.0,
        pen_frac in 0.0f64..0.3,
    ) {
        let init = rho_max * (1.0 - gap_frac);
        let r = (rho_max * 1.2).sqrt();
        let delta = ExpPpf::new(pen_frac * r * 0.5 + 1e-3, 1e-3, 1.0).unwrap();
        let penalty = if pen_frac > 0.0 {
            rho_t_normball(AgentId(2), ppf_norm(&[delta]).unwrap(), r).unwrap()
        } else {
            Penalty::zero()
        };
        let res = build_task_funnel(penalty, rho_max, init, window(lo, lo + 1.0), FunnelMargins::defaults(rho_max), pos);
        match res {
            Ok(f) => {
                let (w0, _) = f.width(0.0);
                let e0 = (init - rho_max) / w0;
                prop_assert!(e0 > -1.0 && e0 < 0.0);
                prop_assert!(e0 >= -pos - 1e-12);
                prop_assert!(f.min_width() > 0.0);
                // Inside the window, the funnel floor −Γ + ρ^max sits above the penalty.
                for k in 0..=100 {
                    let t = lo + k as f64 / 100.0;
                    prop_assert!(rho_max - f.width(t).0 > f.penalty.value(t));
                }
            }
            Err(Error::InfeasibleFunnel { .. }) => {}
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        }
    }
}
