//! Exact-match evaluation under greedy decoding.

use rayon::prelude::*;

use crate::error::Result;
use crate::harness::tasks::TaskInstance;
use crate::lm::{greedy_decode, TaskCodec, TinyLm, EOS};

/// The answer is whatever follows the final `=` of prompt + response.
pub fn extract_answer(prompt: &str, response: &str) -> String {
    let full = format!("{prompt}{response}");
    match full.rfind('=') {
        Some(pos) => full[pos + 1..].to_string(),
        None => full,
    }
}

/// Greedy-decodes every item and scores strict string equality of the
/// extracted answer against the reference. Deterministic for fixed
/// parameters.
pub fn evaluate_exact_match(
    model: &TinyLm,
    dataset: &[TaskInstance],
    codec: &TaskCodec,
    max_response_len: usize,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(crate::error::Error::InvalidInput("empty dataset".into()));
    }
    let hits: usize = dataset
        .par_iter()
        .map(|item| -> Result<usize> {
            let prompt_ids = codec.encode_prompt(&item.prompt)?;
            let response = greedy_decode(model, &prompt_ids, max_response_len, Some(EOS))?;
            let text = codec.decode(&response)?;
            Ok(usize::from(extract_answer(&item.prompt, &text) == item.answer))
        })
        .collect::<Result<Vec<usize>>>()?
        .into_iter()
        .sum();
    Ok(hits as f64 / dataset.len() as f64)
}
