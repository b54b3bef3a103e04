use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};
use diagscale::par::Execution;
use diagscale::sim::{inject_failure, run_scheme, sweep, ScenarioSpec, SchemeOptions, SchemeSpec, SweepConfig};
use diagscale::workload::{generate_workload, GenSpec};
use diagscale::{plan, priority_estimator, schedule, Objective, PlannerOptions};

fn small_sweep(execution: Execution) -> SweepConfig {
    SweepConfig {
        scenario: ScenarioSpec {
            workload: GenSpec {
                apps: 6,
                max_size: 300,
                ..GenSpec::default()
            },
            servers: 200,
            ..ScenarioSpec::default()
        },
        seeds: vec![1, 2],
        execution,
        ..SweepConfig::default()
    }
}

fn sweep_modes(c: &mut Criterion) {
    let mut group = c.benchmark_group("sweep");
    group.sample_size(10);
    for (name, execution) in [("parallel", Execution::Parallel), ("sequential", Execution::Sequential)] {
        let config = small_sweep(execution);
        group.bench_function(name, |b| b.iter(|| sweep(&config).unwrap()));
    }
    group.finish();
}

fn plan_and_schedule(c: &mut Criterion) {
    let mut group = c.benchmark_group("plan_schedule");
    group.sample_size(10);
    for servers in [1_000usize, 10_000] {
        let scenario = ScenarioSpec {
            servers,
            ..ScenarioSpec::default()
        }
        .build()
        .unwrap();
        let (state, _) = inject_failure(&scenario.cluster, 0.5, 1);
        let capacity = state.healthy_capacity();
        group.bench_with_input(BenchmarkId::new("plan", servers), &servers, |b, _| {
            b.iter(|| plan(&scenario.apps, capacity, Objective::Cost, PlannerOptions::default()))
        });
        let activation = plan(&scenario.apps, capacity, Objective::Cost, PlannerOptions::default()).plan;
        group.bench_with_input(BenchmarkId::new("schedule", servers), &servers, |b, _| {
            b.iter_batched(
                || state.clone(),
                |s| schedule(&activation, &s, &scenario.apps),
                BatchSize::LargeInput,
            )
        });
        group.bench_with_input(BenchmarkId::new("diagonal-cost", servers), &servers, |b, _| {
            b.iter(|| {
                run_scheme(
                    &scenario.apps,
                    &state,
                    SchemeSpec::DIAGONAL_COST,
                    SchemeOptions::default(),
                )
            })
        });
    }
    group.finish();
}

// Doubling the graph size should roughly double the traversal time.
fn estimator_doubling(c: &mut Criterion) {
    let mut group = c.benchmark_group("priority_estimator");
    for size in [1_000usize, 2_000, 4_000, 8_000] {
        let app = generate_workload(&GenSpec {
            apps: 1,
            min_size: size,
            max_size: size,
            ..GenSpec::default()
        })
        .unwrap()
        .remove(0);
        group.bench_with_input(BenchmarkId::from_parameter(size), &app, |b, app| {
            b.iter(|| priority_estimator(app))
        });
    }
    group.finish();
}

criterion_group!(benches, sweep_modes, plan_and_schedule, estimator_doubling);
criterion_main!(benches);
