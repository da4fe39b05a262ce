use std::collections::BTreeSet;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use driftlab::eps_net::{loss_nll_t, EpsNet, NetShape};
use driftlab::harness::Builtin;
use driftlab::sampler::{sample_chain, DenoiseOptions};
use driftlab::schedule::make_linear_schedule;
use driftlab::StreamRng;

const MODE: &str = if cfg!(feature = "parallel") {
    "parallel"
} else {
    "sequential"
};

fn bench_network(c: &mut Criterion) {
    let sched = make_linear_schedule(100, 1e-3, 0.2).unwrap();
    let net = EpsNet::init(NetShape::new(2, 16, vec![128, 128, 128]).unwrap(), 0);
    let data = Builtin::mixture();
    let mut g = c.benchmark_group(format!("network/{MODE}"));
    g.sample_size(10);
    for b in [64, 256] {
        let x = data.sample(b, &StreamRng::new(1)).unwrap();
        g.bench_with_input(BenchmarkId::new("predict", b), &b, |bench, _| {
            bench.iter(|| net.predict_rows(x.as_slice(), 50).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("nll-grad", b), &b, |bench, _| {
            bench.iter(|| loss_nll_t(&net, &x, 50, &sched, &StreamRng::new(2)).unwrap())
        });
    }
    let record: BTreeSet<usize> = [0].into_iter().collect();
    g.bench_function("sample-chain-1000", |bench| {
        bench.iter(|| {
            sample_chain(
                &net,
                1000,
                &sched,
                &StreamRng::new(3),
                &record,
                DenoiseOptions::default(),
            )
            .unwrap()
        })
    });
    g.finish();
}

criterion_group!(benches, bench_network);
criterion_main!(benches);
