use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use delaylb::analysis::potential_transfer_matrix_with;
use delaylb::experiment::{run_poa, PoaGrid};
use delaylb::mine::{run_to_fixpoint, MineSettings};
use delaylb::scenario::{generate, LoadKind, ScenarioSpec, SpeedKind, TopologyKind};
use delaylb::Execution;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn scenario(m: usize) -> ScenarioSpec {
    ScenarioSpec {
        m,
        topology: TopologyKind::geographic(),
        speeds: SpeedKind::Uniform { lo: 1.0, hi: 5.0 },
        loads: LoadKind::Peak { total: 100_000.0 },
        seed: 7,
    }
}

fn mine_iterations(c: &mut Criterion) {
    let mut group = c.benchmark_group("mine");
    group.sample_size(10);
    for m in [200, 500] {
        let (topo, loads) = generate(&scenario(m)).unwrap();
        for (name, execution) in MODES {
            let settings = MineSettings {
                max_iterations: 3,
                execution,
                ..Default::default()
            };
            group.bench_with_input(BenchmarkId::new(name, m), &m, |b, _| {
                b.iter(|| black_box(run_to_fixpoint(&topo, &loads, &settings, 1).unwrap().final_cost()))
            });
        }
    }
    group.finish();
}

fn transfer_matrix(c: &mut Criterion) {
    let mut group = c.benchmark_group("transfer_matrix");
    group.sample_size(10);
    let m = 300;
    let (topo, loads) = generate(&scenario(m)).unwrap();
    let state = delaylb::RelayState::local(&loads);
    for (name, execution) in MODES {
        group.bench_with_input(BenchmarkId::new(name, m), &m, |b, _| {
            b.iter(|| black_box(potential_transfer_matrix_with(&state, &topo, execution).unwrap()))
        });
    }
    group.finish();
}

fn poa_cells(c: &mut Criterion) {
    let mut group = c.benchmark_group("poa_grid");
    group.sample_size(10);
    let grid = PoaGrid {
        sizes: vec![20],
        load_means: vec![50.0, 200.0],
        repetitions: 2,
        ..Default::default()
    };
    for (name, execution) in MODES {
        group.bench_function(name, |b| {
            b.iter(|| black_box(run_poa(&grid, 1, execution).unwrap().len()))
        });
    }
    group.finish();
}

criterion_group!(benches, mine_iterations, transfer_matrix, poa_cells);
criterion_main!(benches);
