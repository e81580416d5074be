//! The three training objectives and their baselines, each returning a
//! value together with the exact analytic gradient with respect to the
//! student's logits.
//!
//! Discrete selections (opener membership, candidate sets and their
//! teacher ranking, gate weights, entropy index sets) are stop-gradient:
//! they are computed once from the trace and treated as constants during
//! differentiation. Only the student distribution at selected positions
//! carries gradient.

use crate::error::{Error, Result};
use crate::lm::Trace;
use crate::numerics::{
    jsd_value_and_grad, kl_divergence, log_softmax, reverse_kl_value_and_grad, softmax,
    GradientRow,
};
use crate::selection::{
    adaptive_coverage, select_opener, teacher_rank, top_fraction_entropy_indices,
    top_k_candidates, uncertainty_gate, CoverageHistory, OpenerSpan, PreferencePermutation,
};

/// Per-position gradient rows for a response, one vocabulary-length row per
/// token.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionGradients(pub Vec<GradientRow>);

impl PositionGradients {
    pub fn zeros(len: usize, vocab: usize) -> Self {
        Self(vec![vec![0.0; vocab]; len])
    }

    pub fn rows(&self) -> &[GradientRow] {
        &self.0
    }

    /// `self += scale * other`, shape-checked.
    pub fn add_scaled(&mut self, other: &PositionGradients, scale: f64) -> Result<()> {
        if self.0.len() != other.0.len() {
            return Err(Error::InvalidInput("gradient length mismatch".into()));
        }
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            if a.len() != b.len() {
                return Err(Error::InvalidInput("gradient row length mismatch".into()));
            }
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
        Ok(())
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.0.iter().flatten().copied().collect()
    }
}

/// How the opener coverage percentage is chosen for one trace.
pub enum CoverageMode<'a> {
    /// Use this percentage directly.
    Fixed(f64),
    /// Derive it from the entropy gap via the windowed quantile rule.
    Adaptive(&'a mut CoverageHistory),
}

/// Weights and selection knobs for the combined objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Weight of the indirect (ranking) term.
    pub alpha: f64,
    /// JSD mixing weight for the direct term.
    pub beta: f64,
    /// Gate sharpness.
    pub tau: f64,
    /// Candidate count for the ranking term.
    pub k: usize,
    /// Fixed opener coverage in percent (ignored when `adaptive_c`).
    pub coverage: f64,
    pub adaptive_c: bool,
    /// Fraction of positions regularized by entropy minimization.
    pub entropy_fraction: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.9,
            tau: 1.0,
            k: 10,
            coverage: 10.0,
            adaptive_c: false,
            entropy_fraction: 0.1,
        }
    }
}

/// Diagnostics recorded alongside a combined loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossDiagnostics {
    pub opener_len: usize,
    pub coverage_used: f64,
    pub gate_mean: f64,
    pub indirect_positions: usize,
    pub direct_positions: usize,
    pub entropy_positions: usize,
}

/// The combined objective value, its components, and their weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub indirect: f64,
    pub direct: f64,
    pub entropy_min: f64,
    pub alpha: f64,
    pub total: f64,
    pub diagnostics: LossDiagnostics,
}

impl LossBreakdown {
    /// `total = alpha·indirect + direct + entropy_min` within 1e-10.
    pub fn identity_holds(&self) -> bool {
        (self.total - (self.alpha * self.indirect + self.direct + self.entropy_min)).abs()
            <= 1e-10
    }
}

/// Log-likelihood of a full ranking under the Plackett-Luce model, with the
/// scores already arranged in preference order:
/// `Σ_j (z[j] − log Σ_{ℓ≥j} exp z[ℓ])`, each stage max-shifted.
pub fn pl_log_likelihood(scores_in_pref_order: &[f64]) -> Result<f64> {
    Ok(pl_log_likelihood_and_grad(scores_in_pref_order)?.0)
}

/// As [`pl_log_likelihood`], also returning `d loglik / d score` per entry.
pub fn pl_log_likelihood_and_grad(scores: &[f64]) -> Result<(f64, Vec<f64>)> {
    let k = scores.len();
    if k < 2 {
        return Err(Error::InvalidParameter(format!(
            "ranking needs at least two candidates, got {k}"
        )));
    }
    // Suffix log-sum-exps: lse[j] = log Σ_{ℓ≥j} exp z[ℓ].
    let mut suffix_max = vec![f64::NEG_INFINITY; k];
    suffix_max[k - 1] = scores[k - 1];
    for j in (0..k - 1).rev() {
        suffix_max[j] = suffix_max[j + 1].max(scores[j]);
    }
    let mut lse = vec![0.0; k];
    let mut acc = 0.0;
    for j in (0..k).rev() {
        acc += (scores[j] - suffix_max[j]).exp();
        lse[j] = suffix_max[j] + acc.ln();
        if j > 0 && suffix_max[j - 1] != suffix_max[j] {
            // Rebase the running sum onto the new maximum.
            acc *= (suffix_max[j] - suffix_max[j - 1]).exp();
        }
    }
    let mut value = 0.0;
    for j in 0..k {
        value += scores[j] - lse[j];
    }
    // d/dz[c]: +1 from its own stage, minus its softmax weight in every
    // stage it appears in (stages 0..=c).
    let mut grad = vec![0.0; k];
    for c in 0..k {
        let mut g = 1.0;
        for j in 0..=c {
            g -= (scores[c] - lse[j]).exp();
        }
        grad[c] = g;
    }
    Ok((value, grad))
}

/// Result of the indirect (preference-ranking) objective on one trace.
#[derive(Debug, Clone)]
pub struct IndirectOutcome {
    /// Negative PL log-likelihood summed over opener positions.
    pub loss: f64,
    pub grads: PositionGradients,
    pub opener: OpenerSpan,
    /// The teacher's permutation at each opener position.
    pub permutations: Vec<PreferencePermutation>,
}

/// Indirect distillation: at every opener position the student's top-k
/// candidates are re-ranked by the teacher and the negative PL
/// log-likelihood of that ranking is accumulated. Positions outside the
/// opener contribute nothing.
pub fn indirect_loss(trace: &Trace, k: usize, coverage: CoverageMode) -> Result<IndirectOutcome> {
    trace.require_annotated()?;
    if trace.is_empty() {
        return Err(Error::InvalidInput("empty trace".into()));
    }
    let c = match coverage {
        CoverageMode::Fixed(c) => c,
        CoverageMode::Adaptive(history) => {
            let mean_s = mean(&trace.student_entropy);
            let mean_t = mean(&trace.teacher_entropy);
            adaptive_coverage(mean_s, mean_t, history)
        }
    };
    let opener = select_opener(&trace.student_entropy, c)?;
    let vocab = trace.student_logits[0].len();
    let mut grads = PositionGradients::zeros(trace.len(), vocab);
    let mut loss = 0.0;
    let mut permutations = Vec::with_capacity(opener.len);
    for t in 0..opener.len {
        let candidates = top_k_candidates(&trace.student_logits[t], k)?;
        let perm = teacher_rank(&trace.teacher_logits[t], &candidates)?;
        let preferred = perm.preferred_ids();
        let scores: Vec<f64> = preferred
            .iter()
            .map(|&id| trace.student_logits[t][id])
            .collect();
        let (ll, g) = pl_log_likelihood_and_grad(&scores)?;
        loss -= ll;
        for (j, &id) in preferred.iter().enumerate() {
            grads.0[t][id] -= g[j];
        }
        permutations.push(perm);
    }
    Ok(IndirectOutcome {
        loss,
        grads,
        opener,
        permutations,
    })
}

/// Result of the gated direct objective on one trace.
#[derive(Debug, Clone)]
pub struct DirectOutcome {
    pub loss: f64,
    pub grads: PositionGradients,
    /// Mean gate weight across positions.
    pub gate_mean: f64,
    /// The stop-gradient gate weight at each position.
    pub gates: Vec<f64>,
}

/// Direct distillation: per-position `JSD(β)(teacher ‖ student)` weighted by
/// the uncertainty gate and averaged over the response. The gate weight is
/// a constant during differentiation.
pub fn direct_loss(trace: &Trace, beta: f64, tau: f64) -> Result<DirectOutcome> {
    trace.require_annotated()?;
    if trace.is_empty() {
        return Err(Error::InvalidInput("empty trace".into()));
    }
    let gates = (0..trace.len())
        .map(|t| uncertainty_gate(trace.student_entropy[t], trace.teacher_entropy[t], tau))
        .collect::<Result<Vec<f64>>>()?;
    direct_loss_with_gates(trace, beta, gates)
}

/// The gated accumulation with the gate weights supplied directly; pinning
/// every gate to one reproduces the ungated distribution-matching
/// objective exactly.
pub fn direct_loss_with_gates(trace: &Trace, beta: f64, gates: Vec<f64>) -> Result<DirectOutcome> {
    trace.require_annotated()?;
    if trace.is_empty() {
        return Err(Error::InvalidInput("empty trace".into()));
    }
    let len = trace.len();
    if gates.len() != len {
        return Err(Error::InvalidInput("one gate weight per position required".into()));
    }
    let vocab = trace.student_logits[0].len();
    let mut grads = PositionGradients::zeros(len, vocab);
    let mut sum = 0.0;
    for t in 0..len {
        let teacher_probs = softmax(&trace.teacher_logits[t]);
        let (jsd, jgrad) = jsd_value_and_grad(&teacher_probs, &trace.student_logits[t], beta)?;
        sum += gates[t] * jsd;
        for (gslot, &g) in grads.0[t].iter_mut().zip(&jgrad) {
            *gslot = gates[t] * g / len as f64;
        }
    }
    Ok(DirectOutcome {
        loss: sum / len as f64,
        grads,
        gate_mean: mean(&gates),
        gates,
    })
}

/// Selective entropy minimization: the mean student entropy over the
/// top-fraction highest-entropy positions. Membership in the index set is
/// stop-gradient; the entropies inside it carry gradient.
pub fn entropy_min_loss(trace: &Trace, fraction: f64) -> Result<(f64, PositionGradients)> {
    if trace.student_logits.len() != trace.response.len() {
        return Err(Error::InvalidInput(
            "trace is missing student logit rows".into(),
        ));
    }
    if trace.is_empty() {
        return Err(Error::InvalidInput("empty trace".into()));
    }
    let indices = top_fraction_entropy_indices(&trace.student_entropy, fraction)?;
    let vocab = trace.student_logits[0].len();
    let mut grads = PositionGradients::zeros(trace.len(), vocab);
    let inv = 1.0 / indices.len() as f64;
    let mut loss = 0.0;
    for &t in &indices {
        let lp = log_softmax(&trace.student_logits[t])?;
        let mut h = 0.0;
        for &l in &lp {
            h -= l.exp() * l;
        }
        let h = h.max(0.0);
        loss += h * inv;
        // dH/dz_i = -q_i (ln q_i + H)
        for (i, &l) in lp.iter().enumerate() {
            grads.0[t][i] = -l.exp() * (l + h) * inv;
        }
    }
    Ok((loss, grads))
}

/// The combined objective `α·L_indirect + L_direct + L_em` with its
/// gradient, plus the diagnostics that go into the metrics stream.
///
/// `history` is required when `cfg.adaptive_c` is set and is advanced by one
/// sample.
pub fn total_loss(
    trace: &Trace,
    cfg: &LossConfig,
    history: Option<&mut CoverageHistory>,
) -> Result<(LossBreakdown, PositionGradients)> {
    if cfg.alpha < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "alpha must be non-negative, got {}",
            cfg.alpha
        )));
    }
    let coverage = if cfg.adaptive_c {
        match history {
            Some(h) => CoverageMode::Adaptive(h),
            None => {
                return Err(Error::InvalidParameter(
                    "adaptive coverage requires a CoverageHistory".into(),
                ))
            }
        }
    } else {
        CoverageMode::Fixed(cfg.coverage)
    };
    let indirect = indirect_loss(trace, cfg.k, coverage)?;
    let direct = direct_loss(trace, cfg.beta, cfg.tau)?;
    let (em, em_grads) = entropy_min_loss(trace, cfg.entropy_fraction)?;

    let mut grads = PositionGradients::zeros(trace.len(), trace.student_logits[0].len());
    grads.add_scaled(&indirect.grads, cfg.alpha)?;
    grads.add_scaled(&direct.grads, 1.0)?;
    grads.add_scaled(&em_grads, 1.0)?;

    let em_positions = top_fraction_entropy_indices(&trace.student_entropy, cfg.entropy_fraction)?
        .len();
    let breakdown = LossBreakdown {
        indirect: indirect.loss,
        direct: direct.loss,
        entropy_min: em,
        alpha: cfg.alpha,
        total: cfg.alpha * indirect.loss + direct.loss + em,
        diagnostics: LossDiagnostics {
            opener_len: indirect.opener.len,
            coverage_used: indirect.opener.coverage_used,
            gate_mean: direct.gate_mean,
            indirect_positions: indirect.opener.len,
            direct_positions: trace.len(),
            entropy_positions: em_positions,
        },
    };
    Ok((breakdown, grads))
}

/// The comparison objectives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    ForwardKl,
    ReverseKl,
    GkdJsd,
    SequenceCe,
}

/// Baseline objectives, averaged over response positions.
///
/// `beta` is only used by `GkdJsd`. Forward KL propagates an infinite value
/// when the student assigns zero mass where the teacher has support.
pub fn baseline_loss(
    kind: BaselineKind,
    trace: &Trace,
    beta: f64,
) -> Result<(f64, PositionGradients)> {
    trace.require_annotated()?;
    if trace.is_empty() {
        return Err(Error::InvalidInput("empty trace".into()));
    }
    let len = trace.len();
    let vocab = trace.student_logits[0].len();
    let mut grads = PositionGradients::zeros(len, vocab);
    let mut sum = 0.0;
    for t in 0..len {
        let student = &trace.student_logits[t];
        let teacher_probs = softmax(&trace.teacher_logits[t]);
        match kind {
            BaselineKind::ForwardKl => {
                let q = softmax(student);
                sum += kl_divergence(&teacher_probs, &q)?;
                for i in 0..vocab {
                    grads.0[t][i] = (q[i] - teacher_probs[i]) / len as f64;
                }
            }
            BaselineKind::ReverseKl => {
                let (v, g) = reverse_kl_value_and_grad(&teacher_probs, student)?;
                sum += v;
                for i in 0..vocab {
                    grads.0[t][i] = g[i] / len as f64;
                }
            }
            BaselineKind::GkdJsd => {
                let (v, g) = jsd_value_and_grad(&teacher_probs, student, beta)?;
                sum += v;
                for i in 0..vocab {
                    grads.0[t][i] = g[i] / len as f64;
                }
            }
            BaselineKind::SequenceCe => {
                let lp = log_softmax(student)?;
                let y = trace.response[t];
                sum -= lp[y];
                for i in 0..vocab {
                    let q = lp[i].exp();
                    grads.0[t][i] = (q - if i == y { 1.0 } else { 0.0 }) / len as f64;
                }
            }
        }
    }
    Ok((sum / len as f64, grads))
}

/// Both routes to the preference probability at one position, plus the
/// teacher's label computed two independent ways.
#[derive(Debug, Clone, Copy)]
pub struct Prop1Outcome {
    /// Bradley-Terry probability from the student's logits at position t.
    pub token_level: f64,
    /// The same probability from full sub-response log-probability rewards.
    pub sentence_level: f64,
    /// Teacher prefers the student's first candidate, by logit comparison.
    pub label_by_logits: bool,
    /// Teacher prefers the student's first candidate, by reward comparison.
    pub label_by_rewards: bool,
}

/// Evaluates the token-level and sentence-level forms of the pairwise
/// preference probability for the student's top-2 candidates at position
/// `t` of `response`, along with the teacher's preference label via both
/// the logit route and the full-reward route.
pub fn proposition1_oracle(
    student: &crate::lm::TinyLm,
    teacher: &crate::lm::TinyLm,
    prompt: &[usize],
    response: &[usize],
    t: usize,
) -> Result<Prop1Outcome> {
    if t >= response.len() {
        return Err(Error::InvalidInput(format!(
            "position {t} outside response of length {}",
            response.len()
        )));
    }
    let mut context = prompt.to_vec();
    context.extend_from_slice(&response[..t]);

    let student_row = student.forward(&context)?.pop().expect("non-empty output");
    let teacher_row = teacher.forward(&context)?.pop().expect("non-empty output");
    let candidates = top_k_candidates(&student_row, 2)?;
    let (c1, c2) = (candidates[0], candidates[1]);

    // Token level: Bradley-Terry on the raw student logits.
    let token_level = bt_probability(student_row[c1], student_row[c2]);

    // Sentence level: rewards are full sub-response log-probabilities,
    // each computed by an independent forward pass.
    let r1 = sequence_log_prob(student, prompt, &with_candidate(response, t, c1))?;
    let r2 = sequence_log_prob(student, prompt, &with_candidate(response, t, c2))?;
    let sentence_level = bt_probability(r1, r2);

    let label_by_logits = teacher_row[c1] >= teacher_row[c2];
    let rt1 = sequence_log_prob(teacher, prompt, &with_candidate(response, t, c1))?;
    let rt2 = sequence_log_prob(teacher, prompt, &with_candidate(response, t, c2))?;
    let label_by_rewards = rt1 >= rt2;

    Ok(Prop1Outcome {
        token_level,
        sentence_level,
        label_by_logits,
        label_by_rewards,
    })
}

fn with_candidate(response: &[usize], t: usize, candidate: usize) -> Vec<usize> {
    let mut sub = response[..=t].to_vec();
    sub[t] = candidate;
    sub
}

/// `exp(a) / (exp(a) + exp(b))`, max-shifted.
fn bt_probability(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    let ea = (a - m).exp();
    ea / (ea + (b - m).exp())
}

/// `Σ_s log p(y_s | prompt, y_<s)` over the response tokens.
fn sequence_log_prob(
    model: &crate::lm::TinyLm,
    prompt: &[usize],
    response: &[usize],
) -> Result<f64> {
    let mut tokens = prompt.to_vec();
    tokens.extend_from_slice(response);
    let logits = model.forward(&tokens)?;
    let first = prompt.len() - 1;
    let mut total = 0.0;
    for (s, &tok) in response.iter().enumerate() {
        let lp = log_softmax(&logits[first + s])?;
        total += lp[tok];
    }
    Ok(total)
}

/// The gate's gradient-rescaling factor between a weak student (entropy
/// `hq`) and a strong one (`hq_prime`) against a teacher (`hp`), in both
/// its sigmoid-ratio form and its closed form.
#[derive(Debug, Clone, Copy)]
pub struct RescalingFactor {
    pub sigmoid_ratio: f64,
    pub closed_form: f64,
}

pub fn rescaling_factor(hp: f64, hq: f64, hq_prime: f64) -> Result<RescalingFactor> {
    if hp < 0.0 || hq < 0.0 || hq_prime < 0.0 {
        return Err(Error::InvalidInput("entropies must be non-negative".into()));
    }
    let sigmoid_ratio =
        uncertainty_gate(hq, hp, 1.0)? / uncertainty_gate(hq_prime, hp, 1.0)?;
    let closed_form = ((-hp).exp() + (-hq_prime).exp()) / ((-hp).exp() + (-hq).exp());
    Ok(RescalingFactor {
        sigmoid_ratio,
        closed_form,
    })
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}
