//! Probability and divergence kernels with analytic gradients.
//!
//! Everything here works in nats (natural log) at double precision and is a
//! pure function of its inputs. Gradients are hand-derived; the
//! [`finite_difference_check`] oracle is the independent cross-check used by
//! the test suites.

use crate::error::{Error, Result};

/// Probabilities below this contribute zero to entropy-style sums.
const PROB_FLOOR: f64 = 1e-300;

/// A probability distribution over a vocabulary: non-negative entries that
/// sum to one within 1e-9.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidInput("empty probability vector".into()));
        }
        if entries.iter().any(|&p| !p.is_finite() || p < 0.0) {
            return Err(Error::InvalidInput(
                "probability entries must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = entries.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "probabilities sum to {sum}, expected 1 within 1e-9"
            )));
        }
        Ok(Self(entries))
    }

    pub fn uniform(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::InvalidInput("empty probability vector".into()));
        }
        Ok(Self(vec![1.0 / len as f64; len]))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Deref for ProbabilityVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// One position's vocabulary logits (log-odds scale, nats).
#[derive(Debug, Clone, PartialEq)]
pub struct LogitRow(Vec<f64>);

impl LogitRow {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidInput("empty logit row".into()));
        }
        if entries.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("logits must be finite".into()));
        }
        Ok(Self(entries))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// The induced next-token distribution.
    pub fn softmax(&self) -> ProbabilityVector {
        ProbabilityVector(softmax(&self.0))
    }
}

impl std::ops::Deref for LogitRow {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// The derivative of a scalar loss with respect to one logit row.
pub type GradientRow = Vec<f64>;

/// Log-probabilities of `softmax(logits)`, computed with a max shift.
pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::InvalidInput("empty logit row".into()));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &z in logits {
        sum += (z - max).exp();
    }
    let lse = max + sum.ln();
    Ok(logits.iter().map(|&z| z - lse).collect())
}

/// `softmax(logits)`, max-shifted. Infallible on non-empty finite input.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

/// Shannon entropy of the distribution induced by a logit row, in nats.
///
/// Always within `[0, ln V]`; terms with probability below 1e-300 contribute
/// zero, so a one-hot limit yields exactly 0.
pub fn token_entropy(logits: &[f64]) -> Result<f64> {
    let lp = log_softmax(logits)?;
    let mut h = 0.0;
    for &l in &lp {
        let p = l.exp();
        if p > PROB_FLOOR {
            h -= p * l;
        }
    }
    // Clamp tiny negative rounding residue from the sum.
    Ok(h.max(0.0))
}

/// Forward KL divergence `Σ p ln(p/q)` in nats, with `0·ln(0/·) = 0`.
///
/// Returns `f64::INFINITY` when `q` lacks support somewhere `p` has mass, so
/// callers can detect the mismatch instead of getting an error.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::InvalidInput(format!(
            "length mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    if p.is_empty() {
        return Err(Error::InvalidInput("empty distribution".into()));
    }
    let mut sum = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi <= PROB_FLOOR {
            continue;
        }
        if qi <= 0.0 {
            return Ok(f64::INFINITY);
        }
        sum += pi * (pi / qi).ln();
    }
    Ok(sum.max(0.0))
}

/// Generalized Jensen-Shannon divergence with mixing weight `beta`:
/// `β·KL(p‖m) + (1−β)·KL(q‖m)` where `m = β·p + (1−β)·q`.
///
/// The mixture covers both supports, so the value is always finite for valid
/// probability vectors.
pub fn generalized_jsd(p: &[f64], q: &[f64], beta: f64) -> Result<f64> {
    check_beta(beta)?;
    if p.len() != q.len() {
        return Err(Error::InvalidInput(format!(
            "length mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    if p.is_empty() {
        return Err(Error::InvalidInput("empty distribution".into()));
    }
    let mut kl_pm = 0.0;
    let mut kl_qm = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        let mi = beta * pi + (1.0 - beta) * qi;
        if pi > PROB_FLOOR {
            kl_pm += pi * (pi / mi).ln();
        }
        if qi > PROB_FLOOR {
            kl_qm += qi * (qi / mi).ln();
        }
    }
    Ok((beta * kl_pm + (1.0 - beta) * kl_qm).max(0.0))
}

/// Value and exact gradient of `JSD(β)(teacher ‖ softmax(student_logits))`
/// with respect to the student logits. The teacher is a constant.
///
/// The gradient is `(1−β)·q_i·(ln(q_i/m_i) − KL(q‖m))` with `q` the student
/// distribution and `m` the β-mixture, which follows from differentiating the
/// mixture term through the softmax.
pub fn jsd_value_and_grad(
    teacher: &[f64],
    student_logits: &[f64],
    beta: f64,
) -> Result<(f64, GradientRow)> {
    check_beta(beta)?;
    if teacher.len() != student_logits.len() {
        return Err(Error::InvalidInput(format!(
            "length mismatch: teacher {} vs student {}",
            teacher.len(),
            student_logits.len()
        )));
    }
    let lq = log_softmax(student_logits)?;
    let v = student_logits.len();
    let mut q = vec![0.0; v];
    let mut log_ratio = vec![0.0; v]; // ln(q_i / m_i) where q_i > 0
    let mut kl_pm = 0.0;
    let mut kl_qm = 0.0;
    for i in 0..v {
        q[i] = lq[i].exp();
        let mi = beta * teacher[i] + (1.0 - beta) * q[i];
        if teacher[i] > PROB_FLOOR {
            kl_pm += teacher[i] * (teacher[i] / mi).ln();
        }
        if q[i] > PROB_FLOOR {
            log_ratio[i] = lq[i] - mi.ln();
            kl_qm += q[i] * log_ratio[i];
        }
    }
    let value = (beta * kl_pm + (1.0 - beta) * kl_qm).max(0.0);
    let grad = (0..v)
        .map(|i| (1.0 - beta) * q[i] * (log_ratio[i] - kl_qm))
        .collect();
    Ok((value, grad))
}

/// Gradient of forward KL `KL(p ‖ softmax(z))` with respect to `z`: `q − p`.
pub fn forward_kl_grad(teacher: &[f64], student_logits: &[f64]) -> Result<GradientRow> {
    if teacher.len() != student_logits.len() {
        return Err(Error::InvalidInput("length mismatch".into()));
    }
    let q = softmax(student_logits);
    Ok(q.iter().zip(teacher).map(|(&qi, &pi)| qi - pi).collect())
}

/// Value and gradient of reverse KL `KL(softmax(z) ‖ p)` with respect to `z`:
/// `q_i·(ln(q_i/p_i) − KL(q‖p))`.
pub fn reverse_kl_value_and_grad(
    teacher: &[f64],
    student_logits: &[f64],
) -> Result<(f64, GradientRow)> {
    if teacher.len() != student_logits.len() {
        return Err(Error::InvalidInput("length mismatch".into()));
    }
    let lq = log_softmax(student_logits)?;
    let v = teacher.len();
    let mut q = vec![0.0; v];
    let mut log_ratio = vec![0.0; v];
    let mut kl = 0.0;
    for i in 0..v {
        q[i] = lq[i].exp();
        if q[i] > PROB_FLOOR {
            if teacher[i] <= 0.0 {
                return Ok((f64::INFINITY, vec![f64::NAN; v]));
            }
            log_ratio[i] = lq[i] - teacher[i].ln();
            kl += q[i] * log_ratio[i];
        }
    }
    let grad = (0..v).map(|i| q[i] * (log_ratio[i] - kl)).collect();
    Ok((kl.max(0.0), grad))
}

/// Central-difference verification of a claimed analytic gradient.
///
/// Evaluates `(f(x+h·e_i) − f(x−h·e_i)) / 2h` per coordinate and returns the
/// maximum of `|analytic − numeric| / max(|analytic|, 1e-8)`.
pub fn finite_difference_check<F>(
    f: F,
    point: &[f64],
    step: f64,
    analytic: &[f64],
) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    if step <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "step must be positive, got {step}"
        )));
    }
    if point.len() != analytic.len() {
        return Err(Error::InvalidInput(format!(
            "point has {} coordinates but gradient has {}",
            point.len(),
            analytic.len()
        )));
    }
    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let plus = f(&x);
        x[i] = orig - step;
        let minus = f(&x);
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "function value at coordinate {i} (f+ = {plus}, f- = {minus})"
            )));
        }
        let numeric = (plus - minus) / (2.0 * step);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "beta must lie in (0, 1), got {beta}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_probs(rng: &mut ChaCha8Rng, v: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..v).map(|_| rng.random_range(0.01..1.0)).collect();
        let sum: f64 = raw.iter().sum();
        raw.iter().map(|x| x / sum).collect()
    }

    fn random_logits(rng: &mut ChaCha8Rng, v: usize) -> Vec<f64> {
        (0..v).map(|_| rng.random_range(-4.0..4.0)).collect()
    }

    #[test]
    fn log_softmax_uniform() {
        let lp = log_softmax(&[0.0, 0.0, 0.0, 0.0]).unwrap();
        for &l in &lp {
            assert!((l - (-(4.0f64).ln())).abs() < 1e-15);
        }
    }

    #[test]
    fn log_softmax_shift_invariance() {
        let z = [1.5, -0.3, 2.2, 0.0];
        let shifted: Vec<f64> = z.iter().map(|x| x + 7.25).collect();
        let a = log_softmax(&z).unwrap();
        let b = log_softmax(&shifted).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn log_softmax_two_way_matches_direct_formula() {
        // ln(e^z / Σ e^ẑ) for z = [5, 0], evaluated at 50 decimal digits.
        let lp = log_softmax(&[5.0, 0.0]).unwrap();
        assert!((lp[0] - (-0.006715348489118069)).abs() < 1e-15);
        assert!((lp[1] - (-5.006715348489118)).abs() < 1e-14);
    }

    #[test]
    fn log_softmax_rejects_empty() {
        assert!(matches!(log_softmax(&[]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn entropy_uniform_is_ln_v() {
        let h = token_entropy(&[0.0; 4]).unwrap();
        assert!((h - (4.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn entropy_one_hot_limit_is_zero() {
        let mut z = vec![0.0; 6];
        z[2] = 1e6;
        let h = token_entropy(&z).unwrap();
        assert!(h.abs() < 1e-9);
    }

    #[test]
    fn entropy_matches_high_precision_sum() {
        // -Σ p ln p for softmax([1, 0, 0]) at 50 decimal digits.
        let h = token_entropy(&[1.0, 0.0, 0.0]).unwrap();
        assert!((h - 0.975327829166222).abs() < 1e-14);
    }

    #[test]
    fn entropy_bounds_hold_on_random_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let v = rng.random_range(1..24usize);
            let z = random_logits(&mut rng, v);
            let h = token_entropy(&z).unwrap();
            assert!(h >= 0.0);
            assert!(h <= (v as f64).ln() + 1e-12);
        }
    }

    #[test]
    fn kl_identity_is_zero() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn kl_single_term_analytic() {
        let d = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((d - (2.0f64).ln()).abs() < 1e-15);
    }

    #[test]
    fn kl_matches_high_precision_sum() {
        // p = [1..8]/36, q = [8..1]/36, evaluated at 50 decimal digits.
        let p: Vec<f64> = (1..=8).map(|i| i as f64 / 36.0).collect();
        let q: Vec<f64> = (1..=8).rev().map(|i| i as f64 / 36.0).collect();
        let d = kl_divergence(&p, &q).unwrap();
        assert!((d - 0.6422914090897149).abs() < 1e-14);
    }

    #[test]
    fn kl_support_mismatch_is_infinite() {
        let d = kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!(d.is_infinite());
    }

    #[test]
    fn kl_length_mismatch_rejected() {
        assert!(kl_divergence(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn kl_nonnegative_zero_iff_equal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let p = random_probs(&mut rng, 8);
            let q = random_probs(&mut rng, 8);
            let d = kl_divergence(&p, &q).unwrap();
            assert!(d >= 0.0);
            let max_gap = p
                .iter()
                .zip(&q)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if d < 1e-9 {
                assert!(max_gap < 1e-3);
            }
        }
    }

    #[test]
    fn jsd_identity_is_zero() {
        let p = [0.1, 0.2, 0.7];
        for beta in [0.1, 0.5, 0.9] {
            assert!(generalized_jsd(&p, &p, beta).unwrap().abs() < 1e-15);
        }
    }

    #[test]
    fn jsd_half_beta_matches_direct_evaluation() {
        // β·KL(p‖m) + (1−β)·KL(q‖m) for p=(1,0), q=(.5,.5), β=.5 at 50 digits.
        let d = generalized_jsd(&[1.0, 0.0], &[0.5, 0.5], 0.5).unwrap();
        assert!((d - 0.21576155433883570).abs() < 1e-15);
    }

    #[test]
    fn jsd_rejects_bad_beta() {
        for beta in [0.0, 1.0, -0.2, 1.7, f64::NAN] {
            assert!(matches!(
                generalized_jsd(&[0.5, 0.5], &[0.5, 0.5], beta),
                Err(Error::InvalidParameter(_))
            ));
        }
    }

    #[test]
    fn jsd_swap_symmetry_on_thousand_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let v = rng.random_range(2..16usize);
            let p = random_probs(&mut rng, v);
            let q = random_probs(&mut rng, v);
            let beta = rng.random_range(0.05..0.95);
            let a = generalized_jsd(&p, &q, beta).unwrap();
            let b = generalized_jsd(&q, &p, 1.0 - beta).unwrap();
            assert!(a >= 0.0);
            assert!((a - b).abs() <= 1e-12, "asymmetry {} at beta {}", a - b, beta);
        }
    }

    #[test]
    fn jsd_grad_zero_at_matching_distributions() {
        let z = [0.4, -1.0, 2.0, 0.3];
        let teacher = softmax(&z);
        let (v, g) = jsd_value_and_grad(&teacher, &z, 0.7).unwrap();
        assert!(v.abs() < 1e-15);
        for gi in g {
            assert!(gi.abs() < 1e-10);
        }
    }

    #[test]
    fn jsd_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..100 {
            let v = rng.random_range(2..=32usize);
            let teacher = random_probs(&mut rng, v);
            let z = random_logits(&mut rng, v);
            let beta = rng.random_range(0.05..0.95);
            let (_, grad) = jsd_value_and_grad(&teacher, &z, beta).unwrap();
            let t = teacher.clone();
            let err = finite_difference_check(
                |x| generalized_jsd(&t, &softmax(x), beta).unwrap(),
                &z,
                1e-5,
                &grad,
            )
            .unwrap();
            assert!(err <= 1e-6, "relative error {err} at V={v}, beta={beta}");
        }
    }

    #[test]
    fn jsd_grad_interpolates_kl_limits() {
        // Scaled gradients: ∇JSD(β)/β → ∇FKL as β→0 and ∇JSD(β)/(1−β) → ∇RKL
        // as β→1. The residual is O(β) with an instance-dependent constant,
        // so the instances keep probability ratios moderate.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..100 {
            let v = rng.random_range(2..16usize);
            let raw: Vec<f64> = (0..v).map(|_| rng.random_range(0.05..1.0)).collect();
            let total: f64 = raw.iter().sum();
            let teacher: Vec<f64> = raw.iter().map(|x| x / total).collect();
            let z: Vec<f64> = (0..v).map(|_| rng.random_range(-3.0..3.0)).collect();

            let beta = 1e-4;
            let (_, jg) = jsd_value_and_grad(&teacher, &z, beta).unwrap();
            let fg = forward_kl_grad(&teacher, &z).unwrap();
            let num: f64 = jg
                .iter()
                .zip(&fg)
                .map(|(a, b)| (a / beta - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let den: f64 = fg.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(num / den <= 1e-2, "forward limit violated: {}", num / den);

            let beta = 1.0 - 1e-4;
            let (_, jg) = jsd_value_and_grad(&teacher, &z, beta).unwrap();
            let (_, rg) = reverse_kl_value_and_grad(&teacher, &z).unwrap();
            let num: f64 = jg
                .iter()
                .zip(&rg)
                .map(|(a, b)| (a / (1.0 - beta) - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let den: f64 = rg.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(num / den <= 1e-2, "reverse limit violated: {}", num / den);
        }
    }

    #[test]
    fn forward_and_reverse_kl_grads_check_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let v = rng.random_range(2..12usize);
            let teacher = random_probs(&mut rng, v);
            let z = random_logits(&mut rng, v);

            let fg = forward_kl_grad(&teacher, &z).unwrap();
            let t = teacher.clone();
            let err = finite_difference_check(
                |x| kl_divergence(&t, &softmax(x)).unwrap(),
                &z,
                1e-5,
                &fg,
            )
            .unwrap();
            assert!(err <= 1e-6);

            let (_, rg) = reverse_kl_value_and_grad(&teacher, &z).unwrap();
            let t = teacher.clone();
            let err = finite_difference_check(
                |x| kl_divergence(&softmax(x), &t).unwrap(),
                &z,
                1e-5,
                &rg,
            )
            .unwrap();
            assert!(err <= 1e-6);
        }
    }

    #[test]
    fn fd_check_quadratic_is_exact() {
        let f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let err = finite_difference_check(f, &[3.0, -1.0], 1e-5, &[6.0, -2.0]).unwrap();
        assert!(err <= 1e-9);
    }

    #[test]
    fn fd_check_constant_function() {
        let err = finite_difference_check(|_| 4.2, &[1.0, 2.0], 1e-5, &[0.0, 0.0]).unwrap();
        assert!(err <= 1e-9);
    }

    #[test]
    fn fd_check_rejects_bad_step() {
        assert!(finite_difference_check(|_| 0.0, &[1.0], 0.0, &[0.0]).is_err());
    }

    #[test]
    fn fd_check_propagates_non_finite() {
        let f = |x: &[f64]| (x[0] - 1.0).ln();
        assert!(matches!(
            finite_difference_check(f, &[0.5], 1e-5, &[0.0]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn probability_vector_validation() {
        assert!(ProbabilityVector::new(vec![0.5, 0.5]).is_ok());
        assert!(ProbabilityVector::new(vec![0.6, 0.6]).is_err());
        assert!(ProbabilityVector::new(vec![-0.1, 1.1]).is_err());
        assert!(ProbabilityVector::new(vec![]).is_err());
        let u = ProbabilityVector::uniform(5).unwrap();
        assert!((u.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn logit_row_validation() {
        assert!(LogitRow::new(vec![1.0, f64::NAN]).is_err());
        assert!(LogitRow::new(vec![]).is_err());
        let row = LogitRow::new(vec![2.0, 0.0]).unwrap();
        let p = row.softmax();
        assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
