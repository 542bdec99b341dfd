use std::hint::black_box;
use std::path::Path;

use criterion::{criterion_group, criterion_main, Criterion};
use hopfunnel_core::graph::all_k_hop;
use hopfunnel_core::sim::rk4_step;
use hopfunnel_core::{
    design_observer_funnels, induced_matrices, run_simulation, smooth_min, AgentDynamics, ExpPpf, RunOptions,
    Scenario, Setup,
};

fn scenario(name: &str) -> Scenario {
    Scenario::from_path(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)).unwrap()
}

fn kernels(c: &mut Criterion) {
    let values = [3.2, 1.7, 4.4, 0.9, 2.5];
    c.bench_function("smooth_min_5", |b| b.iter(|| smooth_min(black_box(&values), 20.0)));

    let sc = scenario("case_study.json");
    let gc = sc.comm_graph().unwrap();
    let hops = all_k_hop(&gc, 3).unwrap();
    let nbh = hops.values().max_by_key(|n| n.len()).unwrap();
    let m = induced_matrices(&gc, nbh).unwrap();
    let deltas = vec![ExpPpf::new(10.0, 2.0, 1.0).unwrap(); m.dim()];
    c.bench_function("design_observer_funnels", |b| {
        b.iter(|| design_observer_funnels(black_box(&m), &deltas, None).unwrap())
    });

    let robot = AgentDynamics::Omnirobot {
        wheel_radius: 1.0,
        body_radius: 0.2,
        coupling_gain: 0.1,
        coupling_eps: 1e-4,
    };
    let u = [0.4, -0.3, 0.8];
    c.bench_function("rk4_step_omnirobot", |b| {
        b.iter(|| {
            rk4_step(black_box(&[0.5, -1.0, 0.2]), 0.0, 1e-3, |_, y| {
                Ok(robot.derivative(y, &u, &[0.0; 3], &[]))
            })
            .unwrap()
        })
    });
}

fn closed_loop(c: &mut Criterion) {
    let mut g = c.benchmark_group("closed_loop");
    g.sample_size(10);
    for (name, parallel) in [("case_study_100_steps", false), ("case_study_100_steps_parallel", true)] {
        let setup = Setup::new(scenario("case_study.json"), None).unwrap();
        let opts = RunOptions {
            t_end: Some(0.1),
            parallel,
            ..RunOptions::default()
        };
        g.bench_function(name, |b| b.iter(|| run_simulation(&setup, opts).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, kernels, closed_loop);
criterion_main!(benches);
