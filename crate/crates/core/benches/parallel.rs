//! Sequential vs rayon execution for one clustered co-distillation run and
//! one Monte-Carlo grid oracle. Built without the `parallel` feature, both
//! variants run sequentially.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use perfed_core::experiment::{build_population, DataConfig, ModelChoice, ModelConfig};
use perfed_core::federation::{run_perfed_ckt, FederationConfig};
use perfed_core::par::Execution;
use perfed_core::theory::{closed_form_lambda_alpha, gen_task, grid_search_oracle, OracleGrid};

const MODES: [(&str, Execution); 2] = [
    ("sequential", Execution::Sequential),
    ("parallel", Execution::Parallel),
];

fn perfed_run(c: &mut Criterion) {
    let data = DataConfig {
        num_clients: 16,
        samples_per_class: 300,
        ..Default::default()
    };
    let model = ModelConfig {
        choice: ModelChoice::Mlp { hidden: 32 },
        init_scale: 0.1,
    };
    let pop = build_population(&data, &model, 1).unwrap();
    let mut group = c.benchmark_group("perfed_ckt_5_rounds");
    group.sample_size(10);
    for (name, execution) in MODES {
        let config = FederationConfig {
            rounds: 5,
            clients_per_round: 8,
            clusters: 2,
            execution,
            ..Default::default()
        };
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let mut clients = pop.clients.clone();
                black_box(run_perfed_ckt(&mut clients, &pop.pool, &config).unwrap())
            })
        });
    }
    group.finish();
}

fn oracle_grid(c: &mut Criterion) {
    let task = gen_task(3, 4, 1.0, &[0.3, 0.6, 1.2, 2.4], 1.0, 1.0, 6, 12).unwrap();
    let point = closed_form_lambda_alpha(&task, 0).unwrap();
    let grid = OracleGrid::around(&point, 0, 15).unwrap();
    let mut group = c.benchmark_group("oracle_grid_15");
    group.sample_size(10);
    for (name, execution) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                black_box(
                    grid_search_oracle(&task, 0, &grid, &point, 20_000, 12, execution).unwrap(),
                )
            })
        });
    }
    group.finish();
}

criterion_group!(benches, perfed_run, oracle_grid);
criterion_main!(benches);
