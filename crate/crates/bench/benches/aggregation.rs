use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fedlora_bench::{uniform, updates};
use fedlora_core::{aggregate, AggregationContext, SolverConfig, Strategy};

fn aggregation(c: &mut Criterion) {
    let mut group = c.benchmark_group("aggregate_u10_k128_r8");
    let ups = updates(10, 128, 128, 8, 2);
    let w = uniform(10);
    let ctx = AggregationContext {
        frozen_a: None,
        solver: SolverConfig::default(),
    };
    for strategy in [
        Strategy::Ideal,
        Strategy::Fedit,
        Strategy::Stack,
        Strategy::Fedex,
        Strategy::FloraNa,
    ] {
        group.bench_with_input(BenchmarkId::from_parameter(strategy), &strategy, |b, &s| {
            b.iter(|| aggregate(s, &ups, &w, &ctx).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, aggregation);
criterion_main!(benches);
