use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use erlab_core::autodiff::{gemm, Tape, Tensor};
use erlab_core::rng::stream;

fn bench_gemm(c: &mut Criterion) {
    let mut g = c.benchmark_group("gemm");
    for &(m, k, n) in &[(64, 64, 64), (512, 64, 256), (512, 256, 64)] {
        let a = Tensor::uniform(&[m, k], -1.0, 1.0, &mut stream(0, "a"));
        let b = Tensor::uniform(&[k, n], -1.0, 1.0, &mut stream(1, "b"));
        let mut out = vec![0.0; m * n];
        g.bench_with_input(BenchmarkId::from_parameter(format!("{m}x{k}x{n}")), &(), |bench, _| {
            bench.iter(|| gemm(m, k, n, a.data(), false, b.data(), false, 0.0, black_box(&mut out)))
        });
    }
    g.finish();
}

fn bench_tape(c: &mut Criterion) {
    // Matmul, GELU, log-softmax and a scalar reduction through forward and
    // backward: the shape of one transformer block's hot path.
    let x = Tensor::uniform(&[256, 64], -1.0, 1.0, &mut stream(0, "x")).with_grad();
    let w = Tensor::uniform(&[64, 64], -0.2, 0.2, &mut stream(1, "w")).with_grad();
    c.bench_function("tape/matmul_gelu_log_softmax_backward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.param(&x);
            let wv = tape.param(&w);
            let h = tape.matmul(xv, wv).unwrap();
            let h = tape.gelu(h);
            let p = tape.log_softmax(h);
            let l = tape.sum(p);
            tape.backward(l).unwrap();
            black_box(tape.grad(wv).map(|g| g[0]))
        })
    });
}

criterion_group!(benches, bench_gemm, bench_tape);
criterion_main!(benches);
