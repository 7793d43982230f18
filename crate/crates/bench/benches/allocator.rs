use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion, Throughput};
use slabserve_bench::{ops, pool, replay};

fn alloc_free(c: &mut Criterion) {
    let mut g = c.benchmark_group("slab_replay");
    for slabs in [16u64, 256, 4096] {
        let seq = ops(10_000, 1);
        g.throughput(Throughput::Elements(seq.len() as u64));
        g.bench_with_input(BenchmarkId::from_parameter(slabs), &seq, |b, seq| {
            b.iter_batched(|| pool(slabs), |mut t| replay(&mut t, seq), BatchSize::SmallInput)
        });
    }
    g.finish();
}

fn invariant_check(c: &mut Criterion) {
    let mut t = pool(4096);
    replay(&mut t, &ops(50_000, 2));
    c.bench_function("check_invariants_4096_slabs", |b| b.iter(|| t.check_invariants().unwrap()));
}

criterion_group!(benches, alloc_free, invariant_check);
criterion_main!(benches);
