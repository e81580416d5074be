//! Character-level codec for the synthetic tasks.
//!
//! The alphabet is fixed: digits, the letters `a..j`, and the operator
//! symbols used by the task generators. Ids are stable across runs, so
//! checkpoints and datasets are interchangeable.

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;

const ALPHABET: &str = "0123456789abcdefghij+=;";

/// Maps task characters to token ids and back.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskCodec {
    chars: Vec<char>,
}

impl TaskCodec {
    pub fn new() -> Self {
        Self {
            chars: ALPHABET.chars().collect(),
        }
    }

    /// Total vocabulary size including the three special tokens.
    pub fn vocab_size(&self) -> usize {
        self.chars.len() + 3
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|ch| {
                self.chars
                    .iter()
                    .position(|&c| c == ch)
                    .map(|i| i + 3)
                    .ok_or_else(|| {
                        Error::InvalidInput(format!("character {ch:?} outside task alphabet"))
                    })
            })
            .collect()
    }

    /// Decodes token ids back to text. Special tokens are skipped, so the
    /// output of a sampled response decodes cleanly.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::with_capacity(ids.len());
        for &id in ids {
            if id == PAD || id == BOS || id == EOS {
                continue;
            }
            let ch = self
                .chars
                .get(id - 3)
                .ok_or_else(|| Error::InvalidInput(format!("token id {id} outside vocabulary")))?;
            out.push(*ch);
        }
        Ok(out)
    }

    /// `[BOS] + encode(text)`, the standard prompt form fed to the models.
    pub fn encode_prompt(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = vec![BOS];
        ids.extend(self.encode(text)?);
        Ok(ids)
    }
}

impl Default for TaskCodec {
    fn default() -> Self {
        Self::new()
    }
}
