//! Per-position entropy profiles over sampled traces.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lm::{sample_response, TinyLm, TraceOrigin, EOS};

/// Mean token entropy by response position, with how many traces reached
/// each position.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyProfile {
    pub mean_entropy: Vec<f64>,
    pub counts: Vec<usize>,
}

impl EntropyProfile {
    pub fn max_position(&self) -> usize {
        self.mean_entropy.len()
    }

    /// Index of the largest mean entropy (first one on ties).
    pub fn peak_position(&self) -> usize {
        let mut best = 0;
        for (i, &h) in self.mean_entropy.iter().enumerate() {
            if h > self.mean_entropy[best] {
                best = i;
            }
        }
        best
    }

    /// `position,mean_entropy,count` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        writeln!(w, "position,mean_entropy,count").map_err(|e| Error::io(path, e))?;
        for (i, (&h, &c)) in self.mean_entropy.iter().zip(&self.counts).enumerate() {
            writeln!(w, "{i},{h},{c}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Samples `n` traces (temperature 1.0, prompts cycled, one derived seed per
/// trace) and aggregates mean entropy by position.
pub fn entropy_profile(
    model: &TinyLm,
    prompts: &[Vec<usize>],
    n: usize,
    max_response_len: usize,
    seed: u64,
) -> Result<EntropyProfile> {
    if n == 0 || prompts.is_empty() {
        return Err(Error::InvalidInput(
            "need at least one trace and one prompt".into(),
        ));
    }
    let traces = (0..n)
        .into_par_iter()
        .map(|i| {
            sample_response(
                model,
                &prompts[i % prompts.len()],
                1.0,
                max_response_len,
                Some(EOS),
                crate::distill::mix_seed(seed, i as u64),
                TraceOrigin::StudentSampled,
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let longest = traces.iter().map(|t| t.len()).max().unwrap_or(0);
    let mut sums = vec![0.0; longest];
    let mut counts = vec![0usize; longest];
    for trace in &traces {
        for (pos, &h) in trace.student_entropy.iter().enumerate() {
            sums[pos] += h;
            counts[pos] += 1;
        }
    }
    let mean_entropy = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    Ok(EntropyProfile {
        mean_entropy,
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{LmConfig, TaskCodec};

    fn model_with_spiky_logits() -> (TinyLm, TaskCodec) {
        let codec = TaskCodec::new();
        let config = LmConfig {
            vocab_size: codec.vocab_size(),
            context: 32,
            layers: 1,
            d_model: 8,
            heads: 2,
        };
        let mut lm = TinyLm::init(config, 3).unwrap();
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for x in lm.w_out.iter_mut() {
            *x = rng.random_range(-1.0..1.0);
        }
        (lm, codec)
    }

    #[test]
    fn counts_never_increase_with_position() {
        let (lm, codec) = model_with_spiky_logits();
        let prompts = vec![codec.encode_prompt("12+34=").unwrap()];
        let profile = entropy_profile(&lm, &prompts, 16, 10, 5).unwrap();
        for w in profile.counts.windows(2) {
            assert!(w[0] >= w[1]);
        }
        assert_eq!(profile.max_position(), profile.mean_entropy.len());
        let ln_v = (codec.vocab_size() as f64).ln();
        for &h in &profile.mean_entropy {
            assert!(h >= 0.0 && h <= ln_v + 1e-12);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let (lm, codec) = model_with_spiky_logits();
        let prompts = vec![codec.encode_prompt("ab=").unwrap()];
        let a = entropy_profile(&lm, &prompts, 8, 10, 9).unwrap();
        let b = entropy_profile(&lm, &prompts, 8, 10, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn deterministic_model_gives_zero_profile() {
        let codec = TaskCodec::new();
        let config = LmConfig {
            vocab_size: codec.vocab_size(),
            context: 32,
            layers: 1,
            d_model: 8,
            heads: 2,
        };
        // One-hot behavior: an enormous logit on a single token everywhere.
        let mut lm = TinyLm::init(config, 0).unwrap();
        for i in 0..config.d_model {
            lm.w_out[i * config.vocab_size + 5] = 1e4;
        }
        lm.lnf_b.fill(1.0);
        let prompts = vec![codec.encode_prompt("ab=").unwrap()];
        let profile = entropy_profile(&lm, &prompts, 4, 6, 1).unwrap();
        for &h in &profile.mean_entropy {
            assert!(h.abs() < 1e-6, "entropy {h}");
        }
    }

    #[test]
    fn csv_has_one_row_per_position() {
        let (lm, codec) = model_with_spiky_logits();
        let prompts = vec![codec.encode_prompt("ab=").unwrap()];
        let profile = entropy_profile(&lm, &prompts, 4, 8, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("profile.csv");
        profile.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), profile.max_position() + 1);
        assert!(text.starts_with("position,mean_entropy,count"));
    }
}
