//! Shared fixtures for the benchmarks.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use tsdkd::lm::{LmConfig, TinyLm, Trace, TraceOrigin};
use tsdkd::numerics::token_entropy;
use tsdkd::LogitRow;

/// Random logits with the given spread.
pub fn random_logits(seed: u64, len: usize, spread: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(-spread..spread)).collect()
}

/// A probability vector proportional to uniform draws.
pub fn random_probs(seed: u64, len: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..len).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / total).collect()
}

/// A synthetic annotated trace for loss benchmarks.
pub fn random_trace(seed: u64, vocab: usize, len: usize) -> Trace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = |offset: u64| -> (Vec<LogitRow>, Vec<f64>) {
        let _ = offset;
        let rows: Vec<LogitRow> = (0..len)
            .map(|_| {
                LogitRow::new((0..vocab).map(|_| rng.random_range(-3.0..3.0)).collect())
                    .expect("finite")
            })
            .collect();
        let entropy = rows.iter().map(|r| token_entropy(r).unwrap()).collect();
        (rows, entropy)
    };
    let (student_logits, student_entropy) = rows(0);
    let (teacher_logits, teacher_entropy) = rows(1);
    let response = (0..len).map(|i| i % vocab).collect();
    Trace {
        prompt: vec![1],
        response,
        origin: TraceOrigin::StudentSampled,
        student_logits,
        student_entropy,
        teacher_logits,
        teacher_entropy,
    }
}

/// The default teacher-sized model used in the forward/backward benches.
pub fn teacher_model(seed: u64) -> TinyLm {
    TinyLm::init(
        LmConfig {
            vocab_size: 26,
            context: 96,
            layers: 2,
            d_model: 128,
            heads: 4,
        },
        seed,
    )
    .expect("valid config")
}
