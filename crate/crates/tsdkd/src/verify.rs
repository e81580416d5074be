//! Numerical verification suites: finite-difference checks of every loss
//! gradient, the two-route preference-probability check, Plackett-Luce
//! normalization, JSD limit behavior, and the gate-rescaling identity.
//!
//! The same suites back the `gradcheck` and `prop1-check` subcommands and
//! the acceptance tests, so a tolerance violation fails both.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::lm::{LmConfig, TinyLm, Trace, TraceOrigin};
use crate::losses::{
    baseline_loss, direct_loss, entropy_min_loss, indirect_loss, pl_log_likelihood,
    proposition1_oracle, rescaling_factor, total_loss, BaselineKind, CoverageMode, LossConfig,
    PositionGradients,
};
use crate::numerics::{
    forward_kl_grad, generalized_jsd, jsd_value_and_grad, kl_divergence, log_softmax,
    reverse_kl_value_and_grad, softmax, token_entropy, LogitRow,
};
use crate::selection::{select_opener, top_fraction_entropy_indices, uncertainty_gate};

/// Outcome of one verification suite.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub trials: usize,
    /// Worst observed error across all trials.
    pub worst: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.worst.is_finite() && self.worst <= self.tolerance
    }
}

/// Step size used by all finite-difference comparisons here.
pub const FD_STEP: f64 = 1e-5;
/// Tolerance for loss-gradient checks.
pub const GRAD_TOLERANCE: f64 = 1e-5;

fn random_trace(rng: &mut ChaCha8Rng, vocab: usize, len: usize) -> Trace {
    let mut build_rows = |spread: f64| -> (Vec<LogitRow>, Vec<f64>) {
        let rows: Vec<LogitRow> = (0..len)
            .map(|_| {
                LogitRow::new((0..vocab).map(|_| rng.random_range(-spread..spread)).collect())
                    .expect("finite logits")
            })
            .collect();
        let entropies = rows.iter().map(|r| token_entropy(r).unwrap()).collect();
        (rows, entropies)
    };
    let (student_logits, student_entropy) = build_rows(3.0);
    let (teacher_logits, teacher_entropy) = build_rows(3.0);
    let response = (0..len).map(|_| rng.random_range(0..vocab)).collect();
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

struct LossCase {
    name: &'static str,
    analytic: PositionGradients,
    // Frozen-selection re-evaluation at perturbed student logits, returning
    // the loss split into per-position terms. The checker differences the
    // terms before summing, so terms untouched by a perturbation cancel
    // bitwise and the central difference keeps full precision even where
    // the loss is much larger than the coordinate's slope.
    eval: Box<dyn Fn(&[f64]) -> Vec<f64>>,
}

/// Central-difference check of `analytic` against the term-decomposed loss
/// `eval`.
///
/// Two errors are combined: the gradient-vector relative error
/// `‖a − n‖₂ / max(‖a‖₂, 1e-8)` and a per-coordinate relative error floored
/// at 1e-4. The floor reflects the oracle's own resolution: at step 1e-5 a
/// double-precision difference of O(1) loss terms only resolves slopes down
/// to about 1e-11 absolute, so coordinates with a smaller true slope carry
/// quantization noise that says nothing about the analytic gradient (the
/// norm check still bounds their aggregate effect).
fn term_fd_check(
    eval: &dyn Fn(&[f64]) -> Vec<f64>,
    point: &[f64],
    step: f64,
    analytic: &[f64],
) -> f64 {
    let mut x = point.to_vec();
    let mut worst_coord = 0.0f64;
    let mut sq_gap = 0.0;
    let mut sq_analytic = 0.0;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let plus = eval(&x);
        x[i] = orig - step;
        let minus = eval(&x);
        x[i] = orig;
        // Terms untouched by the perturbation are bitwise identical and
        // cancel exactly.
        let numeric: f64 =
            plus.iter().zip(&minus).map(|(a, b)| a - b).sum::<f64>() / (2.0 * step);
        let gap = (analytic[i] - numeric).abs();
        sq_gap += gap * gap;
        sq_analytic += analytic[i] * analytic[i];
        let rel = gap / analytic[i].abs().max(numeric.abs()).max(1e-4);
        worst_coord = worst_coord.max(rel);
    }
    let norm_rel = sq_gap.sqrt() / sq_analytic.sqrt().max(1e-8);
    norm_rel.max(worst_coord)
}

/// Finite-difference verification of every loss gradient on random traces,
/// with all discrete selections held fixed at their base-point values.
pub fn gradient_suite(trials: usize, seed: u64) -> Result<Vec<CheckReport>> {
    let names = [
        "indirect",
        "direct",
        "entropy_min",
        "total",
        "forward_kl",
        "reverse_kl",
        "gkd_jsd",
        "sequence_ce",
    ];
    let mut worst = vec![0.0f64; names.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    for _ in 0..trials {
        let vocab = rng.random_range(4..=16usize);
        let len = rng.random_range(1..=8usize);
        let trace = random_trace(&mut rng, vocab, len);
        let beta = rng.random_range(0.1..0.9);
        let tau = rng.random_range(0.5..2.0);
        let k = rng.random_range(2..=vocab.min(6));
        let coverage = rng.random_range(5.0..100.0);
        let fraction = rng.random_range(0.05..1.0);
        let flat: Vec<f64> = trace
            .student_logits
            .iter()
            .flat_map(|r| r.as_slice().to_vec())
            .collect();

        for (case_idx, case) in
            loss_cases(&trace, beta, tau, k, coverage, fraction)?.into_iter().enumerate()
        {
            let err = term_fd_check(&*case.eval, &flat, FD_STEP, &case.analytic.flatten());
            if err > worst[case_idx] {
                worst[case_idx] = err;
            }
            debug_assert_eq!(case.name, names[case_idx]);
        }
    }

    Ok(names
        .iter()
        .zip(worst)
        .map(|(name, w)| CheckReport {
            name: (*name).to_string(),
            trials,
            worst: w,
            tolerance: GRAD_TOLERANCE,
        })
        .collect())
}

fn loss_cases(
    trace: &Trace,
    beta: f64,
    tau: f64,
    k: usize,
    coverage: f64,
    fraction: f64,
) -> Result<Vec<LossCase>> {
    let len = trace.len();
    let vocab = trace.student_logits[0].len();
    let alpha = 0.1;

    // Base-point selections, frozen for the re-evaluations below.
    let indirect = indirect_loss(trace, k, CoverageMode::Fixed(coverage))?;
    let opener_len = select_opener(&trace.student_entropy, coverage)?.len;
    let preferred: Vec<Vec<usize>> = indirect
        .permutations
        .iter()
        .map(|p| p.preferred_ids())
        .collect();
    let direct = direct_loss(trace, beta, tau)?;
    let gates: Vec<f64> = (0..len)
        .map(|t| uncertainty_gate(trace.student_entropy[t], trace.teacher_entropy[t], tau))
        .collect::<Result<_>>()?;
    let (_, em_grads) = entropy_min_loss(trace, fraction)?;
    let em_indices = top_fraction_entropy_indices(&trace.student_entropy, fraction)?;
    let teacher_probs: Vec<Vec<f64>> =
        trace.teacher_logits.iter().map(|r| softmax(r)).collect();
    let response = trace.response.clone();

    let eval_indirect = {
        let preferred = preferred.clone();
        move |flat: &[f64]| -> Vec<f64> {
            let rows = replace_student_logits_raw(flat, vocab);
            preferred
                .iter()
                .enumerate()
                .take(opener_len)
                .map(|(t, ids)| {
                    let scores: Vec<f64> = ids.iter().map(|&id| rows[t][id]).collect();
                    -pl_log_likelihood(&scores).unwrap()
                })
                .collect()
        }
    };
    let eval_direct = {
        let gates = gates.clone();
        let teacher_probs = teacher_probs.clone();
        move |flat: &[f64]| -> Vec<f64> {
            let rows = replace_student_logits_raw(flat, vocab);
            (0..len)
                .map(|t| {
                    gates[t]
                        * generalized_jsd(&teacher_probs[t], &softmax(&rows[t]), beta).unwrap()
                        / len as f64
                })
                .collect()
        }
    };
    let eval_em = {
        let em_indices = em_indices.clone();
        move |flat: &[f64]| -> Vec<f64> {
            let rows = replace_student_logits_raw(flat, vocab);
            em_indices
                .iter()
                .map(|&t| token_entropy(&rows[t]).unwrap() / em_indices.len() as f64)
                .collect()
        }
    };

    let cfg = LossConfig {
        alpha,
        beta,
        tau,
        k,
        coverage,
        adaptive_c: false,
        entropy_fraction: fraction,
    };
    let (_, total_grads) = total_loss(trace, &cfg, None)?;
    let eval_total = {
        let eval_indirect = eval_indirect.clone();
        let eval_direct = eval_direct.clone();
        let eval_em = eval_em.clone();
        move |flat: &[f64]| -> Vec<f64> {
            let mut terms: Vec<f64> =
                eval_indirect(flat).into_iter().map(|v| alpha * v).collect();
            terms.extend(eval_direct(flat));
            terms.extend(eval_em(flat));
            terms
        }
    };

    let mut cases = vec![
        LossCase {
            name: "indirect",
            analytic: indirect.grads,
            eval: Box::new(eval_indirect),
        },
        LossCase {
            name: "direct",
            analytic: direct.grads,
            eval: Box::new(eval_direct),
        },
        LossCase {
            name: "entropy_min",
            analytic: em_grads,
            eval: Box::new(eval_em),
        },
        LossCase {
            name: "total",
            analytic: total_grads,
            eval: Box::new(eval_total),
        },
    ];

    for kind in [
        BaselineKind::ForwardKl,
        BaselineKind::ReverseKl,
        BaselineKind::GkdJsd,
        BaselineKind::SequenceCe,
    ] {
        let (_, grads) = baseline_loss(kind, trace, beta)?;
        let teacher_probs = teacher_probs.clone();
        let response = response.clone();
        let eval = move |flat: &[f64]| -> Vec<f64> {
            let rows = replace_student_logits_raw(flat, vocab);
            (0..len)
                .map(|t| {
                    let term = match kind {
                        BaselineKind::ForwardKl => {
                            kl_divergence(&teacher_probs[t], &softmax(&rows[t])).unwrap()
                        }
                        BaselineKind::ReverseKl => {
                            reverse_kl_value_and_grad(&teacher_probs[t], &rows[t]).unwrap().0
                        }
                        BaselineKind::GkdJsd => {
                            jsd_value_and_grad(&teacher_probs[t], &rows[t], beta).unwrap().0
                        }
                        BaselineKind::SequenceCe => -log_softmax(&rows[t]).unwrap()[response[t]],
                    };
                    term / len as f64
                })
                .collect()
        };
        cases.push(LossCase {
            name: match kind {
                BaselineKind::ForwardKl => "forward_kl",
                BaselineKind::ReverseKl => "reverse_kl",
                BaselineKind::GkdJsd => "gkd_jsd",
                BaselineKind::SequenceCe => "sequence_ce",
            },
            analytic: grads,
            eval: Box::new(eval),
        });
    }
    Ok(cases)
}

fn replace_student_logits_raw(flat: &[f64], vocab: usize) -> Vec<Vec<f64>> {
    flat.chunks(vocab).map(|c| c.to_vec()).collect()
}

/// Outcome of the two-route preference check over many random instances.
#[derive(Debug, Clone)]
pub struct Prop1Report {
    pub trials: usize,
    /// Worst |token-level − sentence-level| observed.
    pub worst_gap: f64,
    /// Number of instances where the two teacher-label routes disagreed.
    pub label_disagreements: usize,
    pub tolerance: f64,
}

impl Prop1Report {
    pub fn passed(&self) -> bool {
        self.worst_gap <= self.tolerance && self.label_disagreements == 0
    }
}

/// Runs the preference-equivalence oracle on random tiny models.
pub fn prop1_suite(trials: usize, seed: u64) -> Result<Prop1Report> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_gap = 0.0f64;
    let mut label_disagreements = 0usize;
    for trial in 0..trials {
        let vocab = rng.random_range(6..=12usize);
        let config = LmConfig {
            vocab_size: vocab,
            context: 16,
            layers: 1,
            d_model: 8,
            heads: 2,
        };
        let mut student = TinyLm::init(config, seed ^ (trial as u64) << 1)?;
        let mut teacher = TinyLm::init(config, seed ^ (trial as u64) << 1 | 1)?;
        for m in [&mut student, &mut teacher] {
            for arr in m.arrays_mut() {
                for x in arr.iter_mut() {
                    *x += rng.random_range(-0.3..0.3);
                }
            }
        }
        let prompt = vec![rng.random_range(0..vocab), rng.random_range(0..vocab)];
        let resp_len = rng.random_range(1..=6usize);
        let response: Vec<usize> = (0..resp_len).map(|_| rng.random_range(0..vocab)).collect();
        let t = rng.random_range(0..resp_len);
        let out = proposition1_oracle(&student, &teacher, &prompt, &response, t)?;
        worst_gap = worst_gap.max((out.token_level - out.sentence_level).abs());
        if out.label_by_logits != out.label_by_rewards {
            label_disagreements += 1;
        }
    }
    Ok(Prop1Report {
        trials,
        worst_gap,
        label_disagreements,
        tolerance: 1e-10,
    })
}

/// For k in 2..=5 and many random score sets, the PL probabilities over all
/// k! rankings must sum to one.
pub fn pl_normalization_suite(sets_per_k: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut trials = 0usize;
    for k in 2..=5usize {
        for _ in 0..sets_per_k {
            let scores: Vec<f64> = (0..k).map(|_| rng.random_range(-4.0..4.0)).collect();
            let mut sum = 0.0;
            for_each_permutation(k, &mut |perm| {
                let arranged: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
                sum += pl_log_likelihood(&arranged).unwrap().exp();
            });
            worst = worst.max((sum - 1.0).abs());
            trials += 1;
        }
    }
    Ok(CheckReport {
        name: "pl_normalization".into(),
        trials,
        worst,
        tolerance: 1e-9,
    })
}

fn for_each_permutation(n: usize, f: &mut impl FnMut(&[usize])) {
    let mut items: Vec<usize> = (0..n).collect();
    heap_permute(&mut items, n, f);
}

fn heap_permute(items: &mut Vec<usize>, n: usize, f: &mut impl FnMut(&[usize])) {
    if n == 1 {
        f(items);
        return;
    }
    for i in 0..n {
        heap_permute(items, n - 1, f);
        if n % 2 == 0 {
            items.swap(i, n - 1);
        } else {
            items.swap(0, n - 1);
        }
    }
}

/// The scaled JSD gradient must approach the forward-KL gradient as β→0 and
/// the reverse-KL gradient as β→1:
/// `‖∇JSD(β)/β − ∇FKL‖ / ‖∇FKL‖ ≤ tol` at β = 1e-4 and the mirrored check
/// at β = 1 − 1e-4.
pub fn jsd_limit_suite(trials: usize, seed: u64) -> Result<(CheckReport, CheckReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_fwd = 0.0f64;
    let mut worst_rev = 0.0f64;
    for _ in 0..trials {
        let v = rng.random_range(2..=16usize);
        let raw: Vec<f64> = (0..v).map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let teacher: Vec<f64> = raw.iter().map(|x| x / total).collect();
        let z: Vec<f64> = (0..v).map(|_| rng.random_range(-3.0..3.0)).collect();

        let beta = 1e-4;
        let (_, jg) = jsd_value_and_grad(&teacher, &z, beta)?;
        let fg = forward_kl_grad(&teacher, &z)?;
        worst_fwd = worst_fwd.max(relative_norm_gap(&jg, beta, &fg));

        let beta = 1.0 - 1e-4;
        let (_, jg) = jsd_value_and_grad(&teacher, &z, beta)?;
        let (_, rg) = reverse_kl_value_and_grad(&teacher, &z)?;
        worst_rev = worst_rev.max(relative_norm_gap(&jg, 1.0 - beta, &rg));
    }
    Ok((
        CheckReport {
            name: "jsd_forward_limit".into(),
            trials,
            worst: worst_fwd,
            tolerance: 1e-2,
        },
        CheckReport {
            name: "jsd_reverse_limit".into(),
            trials,
            worst: worst_rev,
            tolerance: 1e-2,
        },
    ))
}

fn relative_norm_gap(scaled: &[f64], scale: f64, reference: &[f64]) -> f64 {
    let num: f64 = scaled
        .iter()
        .zip(reference)
        .map(|(a, b)| (a / scale - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let den: f64 = reference.iter().map(|x| x * x).sum::<f64>().sqrt();
    num / den.max(1e-12)
}

/// Outcome of the gate-rescaling identity scan.
#[derive(Debug, Clone)]
pub struct RescalingReport {
    pub trials: usize,
    pub worst_gap: f64,
    /// Triples with `hq > hq'` where the factor failed to exceed one.
    pub ordering_violations: usize,
    pub tolerance: f64,
}

impl RescalingReport {
    pub fn passed(&self) -> bool {
        self.worst_gap <= self.tolerance && self.ordering_violations == 0
    }
}

/// Sigmoid-ratio vs closed-form rescaling factor on random entropy triples,
/// plus the ordering property: a weaker student always rescales above one.
pub fn rescaling_suite(trials: usize, seed: u64) -> Result<RescalingReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_gap = 0.0f64;
    let mut ordering_violations = 0usize;
    for _ in 0..trials {
        let hp = rng.random_range(0.0..6.0);
        let hq = rng.random_range(0.0..6.0);
        let hq2 = rng.random_range(0.0..6.0);
        let r = rescaling_factor(hp, hq, hq2)?;
        worst_gap = worst_gap.max((r.sigmoid_ratio - r.closed_form).abs());
        if hq > hq2 && !(r.closed_form > 1.0) {
            ordering_violations += 1;
        }
    }
    Ok(RescalingReport {
        trials,
        worst_gap,
        ordering_violations,
        tolerance: 1e-12,
    })
}
