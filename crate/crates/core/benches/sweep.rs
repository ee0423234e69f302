//! Certificate sweep on the Example: sequential against rayon.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::dvector;
use riemoc_core::conditions::*;
use riemoc_core::dynamics::{integrate_first_variation, integrate_state};
use riemoc_core::exec::Execution;
use riemoc_core::grid::GridFn;
use riemoc_core::scenario::{example_scenario, Problem};

fn sweep(c: &mut Criterion) {
    let p = Problem::build(&example_scenario(1.0)).unwrap();
    let traj = integrate_state(&p.sys, &p.manifold, &p.x0, &p.controls, p.horizon).unwrap();
    let basis = AdjointBasis::build(&p.sys, &traj, &p.endpoints).unwrap();
    let family = solve_multiplier_cone(&traj, &p.endpoints, &basis, None, &p.tolerances()).unwrap();
    let v = GridFn::constant(traj.grid, dvector![0.0, 1.0]);
    let x = integrate_first_variation(&p.sys, &traj, &v, &p.variation_start).unwrap();
    let inputs = SecondOrderInputs {
        sys: &p.sys,
        manifold: &p.manifold,
        traj: &traj,
        endpoints: &p.endpoints,
        direction: &v,
        variation: &x,
        xi: None,
    };
    let sets = second_order_sets(&traj, &p.set, &v).unwrap();
    let model = LinearSecondOrderModel::build(&inputs, &basis, sets).unwrap();

    let mut group = c.benchmark_group("certify");
    group.sample_size(10);
    for samples in [1_000, 10_000] {
        for mode in [Execution::Sequential, Execution::Parallel] {
            group.bench_with_input(BenchmarkId::new(format!("{mode:?}"), samples), &samples, |b, &n| {
                b.iter(|| certify_not_weak_pareto(&model, &family, n, 0x5eed, 1e-6, mode).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, sweep);
criterion_main!(benches);
