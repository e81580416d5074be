//! Token-selection machinery shared by the distillation objectives.
//!
//! All tie-breaking is by ascending token id (or original candidate order),
//! which keeps every selection deterministic and reproducible.

use std::collections::VecDeque;

use crate::error::{Error, Result};

/// Coverage buckets used by the adaptive-c rule, in percent.
pub const COVERAGE_BUCKETS: [f64; 4] = [5.0, 10.0, 15.0, 20.0];

/// The response prefix that accumulates the first `c`% of total entropy.
#[derive(Debug, Clone, PartialEq)]
pub struct OpenerSpan {
    /// Number of tokens in the opener, `1 ≤ len ≤ L`.
    pub len: usize,
    /// The coverage percentage that produced this span.
    pub coverage_used: f64,
    /// Fraction of total entropy the opener actually accumulates.
    pub cumulative_ratio: f64,
}

/// The teacher's preference order over the student's top-k candidates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreferencePermutation {
    /// Candidate token ids in the student's descending-logit order.
    pub candidate_ids: Vec<usize>,
    /// `ranking[j]` is the index into `candidate_ids` of the teacher's
    /// (j+1)-th most preferred candidate.
    pub ranking: Vec<usize>,
}

impl PreferencePermutation {
    pub fn k(&self) -> usize {
        self.candidate_ids.len()
    }

    /// Token ids in the teacher's preference order.
    pub fn preferred_ids(&self) -> Vec<usize> {
        self.ranking.iter().map(|&j| self.candidate_ids[j]).collect()
    }
}

/// Bounded window of recent sigmoid-gap scores for the adaptive-c rule.
#[derive(Debug, Clone)]
pub struct CoverageHistory {
    window: usize,
    scores: VecDeque<f64>,
}

impl CoverageHistory {
    pub fn new(window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::InvalidParameter("window must be positive".into()));
        }
        Ok(Self {
            window,
            scores: VecDeque::with_capacity(window),
        })
    }

    /// The default 5-sample moving window.
    pub fn with_default_window() -> Self {
        Self::new(5).expect("positive window")
    }

    pub fn push(&mut self, score: f64) {
        if self.scores.len() == self.window {
            self.scores.pop_front();
        }
        self.scores.push_back(score);
    }

    pub fn mean(&self) -> f64 {
        if self.scores.is_empty() {
            return 0.5;
        }
        self.scores.iter().sum::<f64>() / self.scores.len() as f64
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

impl Default for CoverageHistory {
    fn default() -> Self {
        Self::with_default_window()
    }
}

/// The shortest prefix whose cumulative entropy reaches `c`% of the total.
///
/// A response with zero total entropy yields the minimal opener `len = 1`,
/// and `c = 100` always yields the full response.
pub fn select_opener(entropies: &[f64], c: f64) -> Result<OpenerSpan> {
    if entropies.is_empty() {
        return Err(Error::InvalidInput("empty entropy sequence".into()));
    }
    if !(c > 0.0 && c <= 100.0) {
        return Err(Error::InvalidParameter(format!(
            "coverage must lie in (0, 100], got {c}"
        )));
    }
    if entropies.iter().any(|&h| !h.is_finite() || h < 0.0) {
        return Err(Error::InvalidInput(
            "entropies must be finite and non-negative".into(),
        ));
    }
    let total: f64 = entropies.iter().sum();
    if total <= 0.0 {
        return Ok(OpenerSpan {
            len: 1,
            coverage_used: c,
            cumulative_ratio: 0.0,
        });
    }
    let threshold = c / 100.0;
    let mut cumulative = 0.0;
    for (i, &h) in entropies.iter().enumerate() {
        cumulative += h;
        if cumulative / total >= threshold {
            return Ok(OpenerSpan {
                len: i + 1,
                coverage_used: c,
                cumulative_ratio: cumulative / total,
            });
        }
    }
    // Rounding can leave the running ratio a hair under 1; the full response
    // always satisfies any threshold.
    Ok(OpenerSpan {
        len: entropies.len(),
        coverage_used: c,
        cumulative_ratio: 1.0,
    })
}

/// Quantile map from a mean gap score to a coverage percentage.
pub fn coverage_bucket(mean_score: f64) -> f64 {
    if mean_score < 0.25 {
        COVERAGE_BUCKETS[0]
    } else if mean_score < 0.50 {
        COVERAGE_BUCKETS[1]
    } else if mean_score < 0.75 {
        COVERAGE_BUCKETS[2]
    } else {
        COVERAGE_BUCKETS[3]
    }
}

/// Adaptive coverage: push `σ(H̄_S − H̄_T)` into the history and map the
/// window mean through the quantile table, returning c ∈ {5, 10, 15, 20}.
pub fn adaptive_coverage(
    mean_student_entropy: f64,
    mean_teacher_entropy: f64,
    history: &mut CoverageHistory,
) -> f64 {
    let gap = mean_student_entropy - mean_teacher_entropy;
    history.push(sigmoid(gap));
    coverage_bucket(history.mean())
}

/// Ids of the `k` largest logits in descending-logit order, ties broken by
/// ascending token id.
pub fn top_k_candidates(logits: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::InvalidParameter("k must be positive".into()));
    }
    if k > logits.len() {
        return Err(Error::InvalidParameter(format!(
            "k = {k} exceeds vocabulary size {}",
            logits.len()
        )));
    }
    let mut ids: Vec<usize> = (0..logits.len()).collect();
    ids.sort_by(|&a, &b| {
        logits[b]
            .partial_cmp(&logits[a])
            .expect("finite logits")
            .then(a.cmp(&b))
    });
    ids.truncate(k);
    Ok(ids)
}

/// The teacher's preference permutation over the student's candidates:
/// descending teacher logit, ties broken by the student's original order.
pub fn teacher_rank(
    teacher_logits: &[f64],
    candidate_ids: &[usize],
) -> Result<PreferencePermutation> {
    if candidate_ids.is_empty() {
        return Err(Error::InvalidInput("no candidates to rank".into()));
    }
    let mut seen = vec![false; teacher_logits.len()];
    for &id in candidate_ids {
        if id >= teacher_logits.len() {
            return Err(Error::InvalidInput(format!(
                "candidate id {id} outside vocabulary of size {}",
                teacher_logits.len()
            )));
        }
        if seen[id] {
            return Err(Error::InvalidInput(format!("duplicate candidate id {id}")));
        }
        seen[id] = true;
    }
    let mut ranking: Vec<usize> = (0..candidate_ids.len()).collect();
    ranking.sort_by(|&a, &b| {
        teacher_logits[candidate_ids[b]]
            .partial_cmp(&teacher_logits[candidate_ids[a]])
            .expect("finite logits")
            .then(a.cmp(&b))
    });
    Ok(PreferencePermutation {
        candidate_ids: candidate_ids.to_vec(),
        ranking,
    })
}

/// Indices of the `ceil(s·T)` positions with the largest entropies (at least
/// one), ties broken by ascending position.
pub fn top_fraction_entropy_indices(entropies: &[f64], fraction: f64) -> Result<Vec<usize>> {
    if entropies.is_empty() {
        return Err(Error::InvalidInput("empty entropy sequence".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let count = ((fraction * entropies.len() as f64).ceil() as usize)
        .clamp(1, entropies.len());
    let mut idx: Vec<usize> = (0..entropies.len()).collect();
    idx.sort_by(|&a, &b| {
        entropies[b]
            .partial_cmp(&entropies[a])
            .expect("finite entropies")
            .then(a.cmp(&b))
    });
    idx.truncate(count);
    idx.sort_unstable();
    Ok(idx)
}

/// Sigmoid gate `σ_τ(H_S − H_T)` weighting how much a token is distilled.
///
/// The returned weight is a constant during differentiation (stop-gradient);
/// callers must not route gradients through it. The value is clamped to the
/// largest open interval f64 can represent inside (0, 1), so saturation
/// never returns the endpoints exactly.
pub fn uncertainty_gate(student_entropy: f64, teacher_entropy: f64, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "tau must be positive, got {tau}"
        )));
    }
    let g = sigmoid((student_entropy - teacher_entropy) / tau);
    Ok(g.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0))
}

pub(crate) fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}
