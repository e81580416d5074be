//! Response sampling and the [`Trace`] record that carries a generated
//! response together with both models' per-position logits and entropies.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lm::model::TinyLm;
use crate::numerics::{token_entropy, LogitRow};

/// Which model produced the response tokens of a trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceOrigin {
    StudentSampled,
    TeacherSampled,
}

/// A prompt plus one generated response with per-position logit rows.
///
/// The sampling model's rows are filled at generation time; the other
/// model's rows are filled by annotation. Entropies always match the stored
/// rows.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Prompt token ids, beginning with BOS.
    pub prompt: Vec<usize>,
    /// Generated response token ids, possibly ending with the stop token.
    pub response: Vec<usize>,
    pub origin: TraceOrigin,
    pub student_logits: Vec<LogitRow>,
    pub student_entropy: Vec<f64>,
    pub teacher_logits: Vec<LogitRow>,
    pub teacher_entropy: Vec<f64>,
}

impl Trace {
    /// Response length in tokens.
    pub fn len(&self) -> usize {
        self.response.len()
    }

    pub fn is_empty(&self) -> bool {
        self.response.is_empty()
    }

    /// Errors unless both models' rows are present for every position.
    pub fn require_annotated(&self) -> Result<()> {
        if self.student_logits.len() != self.response.len() {
            return Err(Error::InvalidInput(
                "trace is missing student logit rows; annotate with the student first".into(),
            ));
        }
        if self.teacher_logits.len() != self.response.len() {
            return Err(Error::InvalidInput(
                "trace is missing teacher logit rows; annotate with the teacher first".into(),
            ));
        }
        Ok(())
    }

    /// Re-scores the response with the teacher, filling its logit rows and
    /// entropies. The teacher scores the existing tokens; nothing is
    /// regenerated. Overwrites any previous annotation, so the operation is
    /// idempotent.
    pub fn annotate_with_teacher(&mut self, teacher: &TinyLm) -> Result<()> {
        self.check_shared_vocab(&self.student_logits, teacher)?;
        let (logits, entropy) = self.score_with(teacher)?;
        self.teacher_logits = logits;
        self.teacher_entropy = entropy;
        Ok(())
    }

    /// Re-scores the response with the student (used for teacher-sampled,
    /// off-policy traces).
    pub fn annotate_with_student(&mut self, student: &TinyLm) -> Result<()> {
        self.check_shared_vocab(&self.teacher_logits, student)?;
        let (logits, entropy) = self.score_with(student)?;
        self.student_logits = logits;
        self.student_entropy = entropy;
        Ok(())
    }

    fn check_shared_vocab(&self, existing: &[LogitRow], model: &TinyLm) -> Result<()> {
        if let Some(row) = existing.first() {
            if row.len() != model.config.vocab_size {
                return Err(Error::InvalidInput(format!(
                    "vocabulary mismatch: trace rows have {} entries, model has {}",
                    row.len(),
                    model.config.vocab_size
                )));
            }
        }
        Ok(())
    }

    fn score_with(&self, model: &TinyLm) -> Result<(Vec<LogitRow>, Vec<f64>)> {
        if self.response.is_empty() {
            return Ok((Vec::new(), Vec::new()));
        }
        let mut tokens = self.prompt.clone();
        tokens.extend_from_slice(&self.response);
        // The row conditioning on (prompt, y_<t) sits one position before y_t.
        let all = model.forward(&tokens)?;
        let first = self.prompt.len() - 1;
        let mut logits = Vec::with_capacity(self.response.len());
        let mut entropy = Vec::with_capacity(self.response.len());
        for t in 0..self.response.len() {
            let row = LogitRow::new(all[first + t].clone())?;
            entropy.push(token_entropy(&row)?);
            logits.push(row);
        }
        Ok((logits, entropy))
    }

    /// Token sequence `prompt + response[..t]`, the context for position `t`.
    pub fn context_at(&self, t: usize) -> Vec<usize> {
        let mut ctx = self.prompt.clone();
        ctx.extend_from_slice(&self.response[..t]);
        ctx
    }
}

/// Autoregressive categorical sampling from `softmax(logits / temperature)`.
///
/// Generation stops at `stop_token` or after `max_len` response tokens (or
/// when the context window fills). The sampling model's logit rows are
/// stored raw, without temperature scaling. Seeded and reproducible; as the
/// temperature approaches zero this becomes greedy argmax.
pub fn sample_response(
    model: &TinyLm,
    prompt: &[usize],
    temperature: f64,
    max_len: usize,
    stop_token: Option<usize>,
    seed: u64,
    origin: TraceOrigin,
) -> Result<Trace> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if prompt.is_empty() {
        return Err(Error::InvalidInput("prompt must not be empty".into()));
    }
    if prompt.len() >= model.config.context {
        return Err(Error::InvalidInput(format!(
            "prompt of {} tokens leaves no room in context {}",
            prompt.len(),
            model.config.context
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tokens = prompt.to_vec();
    let mut response = Vec::new();
    let mut rows = Vec::new();
    let mut entropies = Vec::new();

    while response.len() < max_len && tokens.len() < model.config.context {
        // No KV cache: re-run the forward over the whole prefix.
        let logits = model.forward(&tokens)?;
        let last = logits.last().expect("non-empty forward output").clone();
        let row = LogitRow::new(last)?;
        entropies.push(token_entropy(&row)?);
        let next = sample_categorical(&row, temperature, &mut rng);
        rows.push(row);
        response.push(next);
        tokens.push(next);
        if Some(next) == stop_token {
            break;
        }
    }

    let mut trace = Trace {
        prompt: prompt.to_vec(),
        response,
        origin,
        student_logits: Vec::new(),
        student_entropy: Vec::new(),
        teacher_logits: Vec::new(),
        teacher_entropy: Vec::new(),
    };
    match origin {
        TraceOrigin::StudentSampled => {
            trace.student_logits = rows;
            trace.student_entropy = entropies;
        }
        TraceOrigin::TeacherSampled => {
            trace.teacher_logits = rows;
            trace.teacher_entropy = entropies;
        }
    }
    Ok(trace)
}

/// Greedy decoding: argmax at every step, ties resolved to the lowest id.
pub fn greedy_decode(
    model: &TinyLm,
    prompt: &[usize],
    max_len: usize,
    stop_token: Option<usize>,
) -> Result<Vec<usize>> {
    if prompt.is_empty() || prompt.len() >= model.config.context {
        return Err(Error::InvalidInput(
            "prompt must be non-empty and fit the context".into(),
        ));
    }
    let mut tokens = prompt.to_vec();
    let mut response = Vec::new();
    while response.len() < max_len && tokens.len() < model.config.context {
        let logits = model.forward(&tokens)?;
        let next = argmax(logits.last().expect("non-empty output"));
        response.push(next);
        tokens.push(next);
        if Some(next) == stop_token {
            break;
        }
    }
    Ok(response)
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &z) in row.iter().enumerate().skip(1) {
        if z > row[best] {
            best = i;
        }
    }
    best
}

fn sample_categorical(logits: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits
        .iter()
        .map(|&z| ((z - max) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        u -= w;
        if u < 0.0 {
            return i;
        }
    }
    weights.len() - 1
}
