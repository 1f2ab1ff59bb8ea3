use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use kinoplan::config::Config;
use kinoplan::dmpc::{MpcProblem, MpcWeights, SolverOptions};
use kinoplan::envsim::Archetype;
use kinoplan::esdf::EsdfGrid;
use kinoplan::nnplanner::PlannerParams;
use kinoplan::training::Pipeline;
use kinoplan::KinematicModel;
use kinoplan_bench::{arc_reference, sample, world};
use nalgebra::Vector3;

fn mpc(c: &mut Criterion) {
    let model = KinematicModel::bicycle(0.1, 0.5, 1.48, 0.0, 1.5).unwrap();
    let opts = SolverOptions::default();
    for horizon in [10, 50] {
        let prob = MpcProblem::new(model, MpcWeights::default(), arc_reference(horizon, 1.2, 0.5, 0.1)).unwrap();
        c.bench_function(&format!("mpc_solve_T{horizon}"), |b| b.iter(|| black_box(prob.solve(&opts).unwrap())));
        let sol = prob.solve(&opts).unwrap();
        let g = vec![Vector3::new(0.1, -0.2, 0.05); horizon + 1];
        c.bench_function(&format!("mpc_backward_T{horizon}"), |b| {
            b.iter(|| black_box(prob.backward(&sol, &g, &opts).unwrap()))
        });
    }
}

fn esdf(c: &mut Criterion) {
    for a in [Archetype::Forest, Archetype::Indoor] {
        let grid = world(a, 3);
        c.bench_function(&format!("esdf_build_{a}_{}x{}", grid.width, grid.height), |b| {
            b.iter(|| black_box(EsdfGrid::build(&grid)))
        });
    }
}

fn pipeline(c: &mut Criterion) {
    let cfg = Config::default();
    let pipe = Pipeline::from_config(&cfg).unwrap();
    let params = PlannerParams::init(cfg.network, 1).unwrap();
    let s = sample(11);
    c.bench_function("network_forward", |b| {
        b.iter(|| black_box(params.forward(&s.scan, &s.goal, pipe.goal_scale).unwrap()))
    });
    c.bench_function("sample_loss_and_grad", |b| b.iter(|| black_box(pipe.loss_and_grad(&params, &s).unwrap())));
}

criterion_group!(benches, mpc, esdf, pipeline);
criterion_main!(benches);
