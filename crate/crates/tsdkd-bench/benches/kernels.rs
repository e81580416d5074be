use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use tsdkd::losses::{pl_log_likelihood_and_grad, total_loss, LossConfig};
use tsdkd::numerics::{generalized_jsd, jsd_value_and_grad, log_softmax, softmax, token_entropy};

use tsdkd_bench::{random_logits, random_probs, random_trace, teacher_model};

fn bench_numerics(c: &mut Criterion) {
    let z = random_logits(1, 26, 4.0);
    c.bench_function("log_softmax_v26", |b| {
        b.iter(|| log_softmax(black_box(&z)).unwrap())
    });
    c.bench_function("token_entropy_v26", |b| {
        b.iter(|| token_entropy(black_box(&z)).unwrap())
    });

    let p = random_probs(2, 26);
    let q = softmax(&random_logits(3, 26, 4.0));
    c.bench_function("generalized_jsd_v26", |b| {
        b.iter(|| generalized_jsd(black_box(&p), black_box(&q), 0.9).unwrap())
    });
    c.bench_function("jsd_value_and_grad_v26", |b| {
        b.iter(|| jsd_value_and_grad(black_box(&p), black_box(&z), 0.9).unwrap())
    });
}

fn bench_ranking(c: &mut Criterion) {
    let scores = random_logits(4, 10, 3.0);
    c.bench_function("pl_log_likelihood_k10", |b| {
        b.iter(|| pl_log_likelihood_and_grad(black_box(&scores)).unwrap())
    });
}

fn bench_losses(c: &mut Criterion) {
    let trace = random_trace(5, 26, 32);
    let cfg = LossConfig::default();
    c.bench_function("total_loss_v26_l32", |b| {
        b.iter(|| total_loss(black_box(&trace), black_box(&cfg), None).unwrap())
    });
}

fn bench_model(c: &mut Criterion) {
    let model = teacher_model(6);
    let tokens: Vec<usize> = (0..24).map(|i| i % 26).collect();
    c.bench_function("teacher_forward_l24", |b| {
        b.iter(|| model.forward(black_box(&tokens)).unwrap())
    });
    let dlogits = vec![vec![0.01; 26]; 24];
    c.bench_function("teacher_backward_l24", |b| {
        b.iter_batched(
            || (tokens.clone(), dlogits.clone()),
            |(t, d)| model.backward(&t, &d).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, bench_numerics, bench_ranking, bench_losses, bench_model);
criterion_main!(benches);
