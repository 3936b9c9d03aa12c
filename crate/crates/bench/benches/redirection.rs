use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use promptredir::inference::stubs::Scripted;
use promptredir::inference::GuidanceSession;
use promptredir::redirection::{build_pseudo_mask, redirect, token_norms};
use promptredir_bench::embedding;

const D: usize = 64;

fn redirection(c: &mut Criterion) {
    let mut group = c.benchmark_group("redirection");
    for l in [8usize, 24, 77] {
        let p = embedding(l, D, 1);
        let delta = embedding(l, D, 2);
        let mask: Vec<f64> = (0..l).map(|i| if i % 3 == 0 { 0.9 } else { 0.1 }).collect();
        let alpha = vec![0.5; l];
        let norms = token_norms(&p, D);
        group.bench_with_input(BenchmarkId::new("redirect", l), &l, |b, _| {
            b.iter(|| redirect(&p, &delta, &mask, &alpha, 1.0, Some(&norms), D).unwrap())
        });
        let q = embedding(l, D, 3);
        group.bench_with_input(BenchmarkId::new("pseudo_mask", l), &l, |b, _| {
            b.iter(|| build_pseudo_mask(&p, &q, D, 0.2).unwrap())
        });
    }
    group.finish();
}

fn session(c: &mut Criterion) {
    let base = embedding(16, D, 4);
    let stub = Scripted::constant(D, 50, true);
    c.bench_function("session/50_steps_k5", |b| {
        b.iter(|| {
            let mut s = GuidanceSession::new(&base, D, 5, 1.0).unwrap();
            for t in (1..=50).rev() {
                s.step(&[0.0], t, &stub).unwrap();
            }
            s.interventions()
        })
    });
}

criterion_group!(benches, redirection, session);
criterion_main!(benches);
