use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mns_core::network::{init_weights, NetworkSpec};
use mns_core::soa::SoaParams;
use mns_core::training::{apply_gradients, backprop, Algorithm, GradientSet};

/// A digit-like input: about a fifth of the pixels lit.
fn sparse_input() -> Vec<f64> {
    (0..784).map(|i| if (i * 7919) % 5 == 0 { 0.1 * ((i % 13) as f64 / 13.0) } else { 0.0 }).collect()
}

fn soa(c: &mut Criterion) {
    let mut group = c.benchmark_group("soa");
    for n in [1, 2, 6] {
        let params = SoaParams::new(26.0, 0.01, n).unwrap();
        let x: Vec<f64> = (0..n).map(|i| 0.01 * (i + 1) as f64).collect();
        let mut out = vec![0.0; n];
        let mut jac = vec![0.0; n * n];
        group.bench_with_input(BenchmarkId::new("activate", n), &n, |b, _| {
            b.iter(|| params.activate_into(black_box(&x), &mut out))
        });
        group.bench_with_input(BenchmarkId::new("jacobian", n), &n, |b, _| {
            b.iter(|| params.jacobian_into(black_box(&x), &mut jac))
        });
    }
    group.finish();
}

fn network(c: &mut Criterion) {
    let spec = NetworkSpec::new(vec![784, 60, 10], 6, 26.0, 0.01).unwrap();
    let net = init_weights(&spec, 1).unwrap();
    let input = sparse_input();
    let mut expected = vec![0.0; 10];
    expected[3] = 1.0;

    c.bench_function("forward_784_60_10", |b| b.iter(|| net.forward(black_box(&input)).unwrap()));

    let trace = net.forward_trace(&input).unwrap();
    let mut group = c.benchmark_group("backprop_784_60_10");
    for alg in Algorithm::ALL {
        group.bench_function(alg.as_str(), |b| {
            b.iter(|| backprop(&net, black_box(&trace), &expected, alg).unwrap())
        });
    }
    group.finish();

    c.bench_function("train_step_batch32", |b| {
        let mut net = net.clone();
        b.iter(|| {
            let mut grads = GradientSet::zeros_like(&net);
            for _ in 0..32 {
                let trace = net.forward_trace(&input).unwrap();
                let g = backprop(&net, &trace, &expected, Algorithm::NewBp).unwrap();
                for (acc, w) in grads.weights.iter_mut().zip(&g.weights) {
                    acc.axpy(1.0 / 32.0, w);
                }
            }
            apply_gradients(&mut net, &grads, 0.3).unwrap();
        })
    });
}

criterion_group!(benches, soa, network);
criterion_main!(benches);
