use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use specprefetch::engine::Scheme;
use specprefetch_bench::{config, skewed_model};

fn bench_decode(c: &mut Criterion) {
    let model = skewed_model(4, 128);
    let mut g = c.benchmark_group("decode_8_steps");
    g.sample_size(10);
    for scheme in Scheme::ALL {
        let cfg = config(scheme, 512, 8);
        g.bench_with_input(BenchmarkId::from_parameter(scheme), &cfg, |b, cfg| {
            b.iter(|| specprefetch::run(&model, cfg).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench_decode);
criterion_main!(benches);
