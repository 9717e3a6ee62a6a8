use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use grokgeo::geometry::{hessian_trace_blocks_with, representativeness_kde_with, KdeConfig};
use grokgeo::numkit::{matmul_tn_with, matmul_with, random_matrix, softmax_rows, Rng};
use grokgeo::regularizers::flatness_reg_with;
use grokgeo::Exec;

fn modes() -> Vec<(&'static str, Exec)> {
    #[allow(unused_mut)]
    let mut v = vec![("sequential", Exec::Sequential)];
    #[cfg(feature = "parallel")]
    v.push(("parallel", Exec::Parallel));
    v
}

fn matmuls(c: &mut Criterion) {
    let mut rng = Rng::new(7);
    let a = random_matrix(&mut rng, 480, 512, 1.0);
    let b = random_matrix(&mut rng, 512, 31, 1.0);
    let dz = random_matrix(&mut rng, 480, 31, 1.0);
    let mut g = c.benchmark_group("matmul");
    for (name, exec) in modes() {
        g.bench_with_input(BenchmarkId::new("nn_480x512x31", name), &exec, |bch, &e| {
            bch.iter(|| matmul_with(e, black_box(&a), black_box(&b)).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("tn_512x480x31", name), &exec, |bch, &e| {
            bch.iter(|| matmul_tn_with(e, black_box(&a), black_box(&dz)).unwrap())
        });
    }
    g.finish();
}

fn geometry(c: &mut Criterion) {
    let mut rng = Rng::new(11);
    let phi = random_matrix(&mut rng, 480, 512, 0.3);
    let eval = random_matrix(&mut rng, 481, 512, 0.3);
    let w = random_matrix(&mut rng, 31, 512, 0.05);
    let logits = random_matrix(&mut rng, 480, 31, 1.0);
    let probs = softmax_rows(&logits);
    let kde = KdeConfig::default();
    let mut g = c.benchmark_group("geometry");
    g.sample_size(20);
    for (name, exec) in modes() {
        g.bench_with_input(BenchmarkId::new("hessian_trace_blocks", name), &exec, |bch, &e| {
            bch.iter(|| hessian_trace_blocks_with(e, &w, &phi, &probs).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("flatness_reg", name), &exec, |bch, &e| {
            bch.iter(|| flatness_reg_with(e, &w, &phi, &probs, false).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("representativeness_kde", name), &exec, |bch, &e| {
            bch.iter(|| representativeness_kde_with(e, &phi, &eval, &kde).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, matmuls, geometry);
criterion_main!(benches);
