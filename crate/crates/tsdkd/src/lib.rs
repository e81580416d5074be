//! Token-selective dual knowledge distillation for tiny autoregressive
//! language models, at desk scale.
//!
//! The student proposes, the teacher ranks: the indirect objective applies a
//! Plackett-Luce ranking loss over the student's own top-k candidates inside
//! the high-entropy opener of each response; the direct objective matches
//! distributions through a generalized Jensen-Shannon divergence gated by
//! the student-teacher entropy gap; and a selective entropy-minimization
//! term keeps the student confident on its hardest tokens. A small
//! transformer stack, an on-policy trainer, synthetic tasks, and numerical
//! verification suites make every gradient and identity checkable end to
//! end.

pub mod distill;
pub mod error;
pub mod harness;
pub mod lm;
pub mod losses;
pub mod numerics;
pub mod selection;
pub mod verify;

pub use error::{Error, Result};
pub use lm::{LmConfig, TaskCodec, TinyLm, Trace, TraceOrigin};
pub use losses::{
    BaselineKind, CoverageMode, LossBreakdown, LossConfig, LossDiagnostics, PositionGradients,
};
pub use numerics::{GradientRow, LogitRow, ProbabilityVector};
pub use selection::{CoverageHistory, OpenerSpan, PreferencePermutation};
