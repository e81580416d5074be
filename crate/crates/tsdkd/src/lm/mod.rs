//! Tiny decoder-only autoregressive language models: deterministic forward
//! pass, analytic backpropagation, seeded sampling, a character codec, and a
//! binary checkpoint format.

pub mod checkpoint;
pub mod codec;
mod model;
mod sample;

pub use codec::{TaskCodec, BOS, EOS, PAD};
pub use model::{LmConfig, TinyLm};
pub use sample::{greedy_decode, sample_response, Trace, TraceOrigin};
