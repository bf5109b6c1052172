use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use rollover::control::{self, ControlBranch};
use rollover::model::build_consistent_vasicek;
use rollover::pde::{self, Grid1D, SolverOptions};
use rollover::sim::{self, SimConfig};
use rollover::{CoefficientField, Execution};

fn model() -> rollover::FactorModelSpec {
    build_consistent_vasicek(1.0, 0.05, 0.1, 2.0, CoefficientField::quadratic_1d(0.05, 0.01, 0.001), 0.05).unwrap()
}

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn spot_spread(c: &mut Criterion) {
    let m = model();
    let mut group = c.benchmark_group("mc_spot_spread");
    group.sample_size(10);
    for paths in [10_000usize, 50_000] {
        for (name, exec) in MODES {
            let cfg = SimConfig::new(0.0, 1.0, 1e-3, paths, 42).execution(exec);
            group.bench_with_input(BenchmarkId::new(name, paths), &cfg, |b, cfg| {
                b.iter(|| sim::mc_spot_spread(&m, 1.0, 0.0, &[0.05], black_box(cfg)).unwrap())
            });
        }
    }
    group.finish();
}

fn path_bundle(c: &mut Criterion) {
    let m = model();
    let mut group = c.benchmark_group("simulate");
    group.sample_size(10);
    for (name, exec) in MODES {
        let cfg = SimConfig::new(0.0, 1.0, 1e-2, 20_000, 42).execution(exec);
        group.bench_function(name, |b| b.iter(|| sim::simulate(&m, black_box(&cfg), &m.x0, 1.0).unwrap()));
    }
    group.finish();
}

fn controlled_objective(c: &mut Criterion) {
    let m = model();
    let grid = Grid1D::over_domain(&m, 0.0, 1.0, 400, 400).unwrap();
    let s = pde::solve_spot_spread(&m, &grid, SolverOptions::default()).unwrap();
    let branch = ControlBranch::lower(0.5).unwrap();
    let u = control::candidate_spot_control(&s, &m, branch).unwrap().control;
    let mut group = c.benchmark_group("spot_objective");
    group.sample_size(10);
    for (name, exec) in MODES {
        let cfg = SimConfig::new(0.0, 1.0, 2e-3, 20_000, 42).execution(exec);
        group.bench_function(name, |b| {
            b.iter(|| control::evaluate_spot_objective(&m, &u, branch, 0.0, 0.05, 1.0, black_box(&cfg)).unwrap())
        });
    }
    group.finish();
}

fn pde_solve(c: &mut Criterion) {
    let m = model();
    let grid = Grid1D::over_domain(&m, 0.0, 1.0, 400, 400).unwrap();
    c.bench_function("solve_spot_spread_400x400", |b| {
        b.iter(|| pde::solve_spot_spread(&m, black_box(&grid), SolverOptions::default()).unwrap())
    });
}

criterion_group!(benches, spot_spread, path_bundle, controlled_objective, pde_solve);
criterion_main!(benches);
