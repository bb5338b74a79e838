use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use qsdlab_bench::competition;
use qsdlab_core::lyapunov::drift_ratio;
use qsdlab_core::sim::{replica_rng, simulate_with, RateTable, State};
use qsdlab_core::spectral::{build_killed_generator, solve_qsd, BoundaryPolicy};

fn bench_simulate(c: &mut Criterion) {
    let model = competition();
    let mut group = c.benchmark_group("simulate");
    for k in [10.0, 50.0] {
        let n0 = State::new(vec![(1.5 * k) as u32; 2]);
        let hi = vec![(6.0 * k) as u32; 2];
        let table = RateTable::build(&model, k, &hi, 4_000_000)
            .unwrap()
            .unwrap();
        group.bench_with_input(BenchmarkId::new("tabled", k as u64), &k, |b, &k| {
            let mut stream = 0u64;
            b.iter(|| {
                stream += 1;
                let traj = simulate_with(
                    &model,
                    k,
                    Some(&table),
                    &n0,
                    2.0,
                    &mut replica_rng(9, stream),
                )
                .unwrap();
                black_box(traj.times.len())
            })
        });
        group.bench_with_input(BenchmarkId::new("direct", k as u64), &k, |b, &k| {
            let mut stream = 0u64;
            b.iter(|| {
                stream += 1;
                let traj =
                    simulate_with(&model, k, None, &n0, 2.0, &mut replica_rng(9, stream))
                        .unwrap();
                black_box(traj.times.len())
            })
        });
    }
    group.finish();
}

fn bench_solve_qsd(c: &mut Criterion) {
    let model = competition();
    let mut group = c.benchmark_group("solve_qsd");
    group.sample_size(10);
    for k in [4.0f64, 8.0] {
        let hi = vec![(6.0 * k).ceil() as u32; 2];
        let gen = build_killed_generator(&model, k, &hi, BoundaryPolicy::Reflect).unwrap();
        group.bench_with_input(
            BenchmarkId::from_parameter(gen.n_states()),
            &gen,
            |b, gen| b.iter(|| black_box(solve_qsd(gen, 1e-10, 400_000).unwrap().lambda0)),
        );
    }
    group.finish();
}

fn bench_drift_ratio(c: &mut Criterion) {
    let model = competition();
    c.bench_function("drift_ratio", |b| {
        let n_star = [75u32, 75];
        let mut n = 0u32;
        b.iter(|| {
            n = (n + 1) % 150;
            black_box(drift_ratio(&model, 50.0, 0.05, &[n + 1, 80], &n_star).unwrap())
        })
    });
}

criterion_group!(benches, bench_simulate, bench_solve_qsd, bench_drift_ratio);
criterion_main!(benches);
