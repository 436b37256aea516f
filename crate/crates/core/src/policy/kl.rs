//! Exact reverse KL between tabular sequence policies by exhaustive enumeration.
//!
//! A trajectory ends at the terminator or after `max_len` tokens, whichever
//! comes first, matching how rollouts are sampled. All log-probabilities here
//! are exact (unclamped).

use serde::{Deserialize, Serialize};

use super::ensemble::TeacherEnsemble;
use super::gradient::LogitGradient;
use super::tabular::{score_tokens, TabularPolicy};
use crate::error::{OpdError, Result};
use crate::rollout::{token_reward, Prompt, TokenId};

/// Default cap on the number of enumerated trajectories.
pub const DEFAULT_ENUMERATION_BUDGET: u128 = 10_000_000;

/// How per-token rewards are folded into the broadcast trajectory return.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReturnAggregation {
    /// Length-normalized mean, the training default.
    Mean,
    /// Plain sum over the trajectory.
    Sum,
}

fn check_pair(student: &TabularPolicy, teacher: &TabularPolicy) -> Result<()> {
    if student.vocab_size() != teacher.vocab_size() || student.terminator() != teacher.terminator() {
        return Err(OpdError::InvalidConfig(
            "student and teacher disagree on vocabulary or terminator".into(),
        ));
    }
    Ok(())
}

fn check_budget(vocab_size: usize, max_len: usize, budget: u128) -> Result<()> {
    if max_len == 0 {
        return Err(OpdError::InvalidConfig("max_len must be at least 1".into()));
    }
    let required = (vocab_size as u128).checked_pow(max_len as u32).unwrap_or(u128::MAX);
    if required > budget {
        return Err(OpdError::OracleScale { required, budget });
    }
    Ok(())
}

/// Calls `visit(tokens, log_prob)` for every complete trajectory of `policy`.
pub fn enumerate_trajectories(
    policy: &TabularPolicy,
    prompt_tokens: &[TokenId],
    max_len: usize,
    budget: u128,
    mut visit: impl FnMut(&[TokenId], f64),
) -> Result<()> {
    check_budget(policy.vocab_size(), max_len, budget)?;
    let bucket = policy.bucket_of(prompt_tokens);
    let mut prefix = Vec::with_capacity(max_len);
    fn walk(
        policy: &TabularPolicy,
        bucket: usize,
        max_len: usize,
        prefix: &mut Vec<TokenId>,
        log_prob: f64,
        visit: &mut dyn FnMut(&[TokenId], f64),
    ) {
        let ctx = policy.context(bucket, prefix.last().copied());
        let lps = policy.log_probs(ctx);
        for (tok, lp) in lps.into_iter().enumerate() {
            let tok = tok as TokenId;
            prefix.push(tok);
            if tok == policy.terminator() || prefix.len() == max_len {
                visit(prefix, log_prob + lp);
            } else {
                walk(policy, bucket, max_len, prefix, log_prob + lp, visit);
            }
            prefix.pop();
        }
    }
    walk(policy, bucket, max_len, &mut prefix, 0.0, &mut visit);
    Ok(())
}

/// `sum_tau pi_s(tau) [log pi_s(tau) - log pi_t(tau)]` over all trajectories.
pub fn exact_reverse_kl(
    student: &TabularPolicy,
    teacher: &TabularPolicy,
    prompt_tokens: &[TokenId],
    max_len: usize,
) -> Result<f64> {
    exact_reverse_kl_with_budget(student, teacher, prompt_tokens, max_len, DEFAULT_ENUMERATION_BUDGET)
}

pub fn exact_reverse_kl_with_budget(
    student: &TabularPolicy,
    teacher: &TabularPolicy,
    prompt_tokens: &[TokenId],
    max_len: usize,
    budget: u128,
) -> Result<f64> {
    check_pair(student, teacher)?;
    let mut kl = 0.0;
    let mut failure = None;
    enumerate_trajectories(student, prompt_tokens, max_len, budget, |tokens, log_p| {
        match teacher.raw_token_logprobs(prompt_tokens, tokens) {
            Ok(lq) => {
                let log_q: f64 = lq.iter().sum();
                kl += log_p.exp() * (log_p - log_q);
            }
            Err(e) => failure = Some(e),
        }
    })?;
    match failure {
        Some(e) => Err(e),
        None => Ok(kl),
    }
}

/// Weighted reverse KL of the student against the teachers an ensemble uses for `prompt`.
pub fn ensemble_reverse_kl(
    student: &TabularPolicy,
    ensemble: &TeacherEnsemble,
    prompt: &Prompt,
    max_len: usize,
) -> Result<f64> {
    let weights = ensemble.weights_for(prompt)?;
    let mut total = 0.0;
    for ((_, teacher), w) in ensemble.teachers().zip(weights) {
        if w > 0.0 {
            total += w * exact_reverse_kl(student, teacher, &prompt.tokens, max_len)?;
        }
    }
    Ok(total)
}

/// Analytic gradient of [`exact_reverse_kl`] with respect to the student logits.
///
/// Walks the prefix tree once, computing the value `V(s)` (expected remaining
/// log-ratio) of every prefix bottom-up; each prefix with occupancy `occ`
/// contributes `occ * p(b|s) * (Q(s, b) - V(s))` to logit `b` of its row.
pub fn reverse_kl_gradient(
    student: &TabularPolicy,
    teacher: &TabularPolicy,
    prompt_tokens: &[TokenId],
    max_len: usize,
) -> Result<(f64, LogitGradient)> {
    check_pair(student, teacher)?;
    check_budget(student.vocab_size(), max_len, DEFAULT_ENUMERATION_BUDGET)?;
    let s_bucket = student.bucket_of(prompt_tokens);
    let t_bucket = teacher.bucket_of(prompt_tokens);
    let mut grad = LogitGradient::zeros(student);

    struct Walk<'a> {
        student: &'a TabularPolicy,
        teacher: &'a TabularPolicy,
        s_bucket: usize,
        t_bucket: usize,
        max_len: usize,
    }

    impl Walk<'_> {
        fn value(&self, prev: Option<TokenId>, depth: usize, occ: f64, grad: &mut LogitGradient) -> f64 {
            let s_ctx = self.student.context(self.s_bucket, prev);
            let t_ctx = self.teacher.context(self.t_bucket, prev);
            let lp = self.student.log_probs(s_ctx);
            let lq = self.teacher.log_probs(t_ctx);
            let v = lp.len();
            let mut q = vec![0.0; v];
            for a in 0..v {
                let p_a = lp[a].exp();
                let tok = a as TokenId;
                let leaf = tok == self.student.terminator() || depth + 1 == self.max_len;
                let future = if leaf {
                    0.0
                } else {
                    self.value(Some(tok), depth + 1, occ * p_a, grad)
                };
                q[a] = lp[a] - lq[a] + future;
            }
            let value: f64 = (0..v).map(|a| lp[a].exp() * q[a]).sum();
            let row = &mut grad.values[s_ctx * v..(s_ctx + 1) * v];
            for b in 0..v {
                row[b] += occ * lp[b].exp() * (q[b] - value);
            }
            value
        }
    }

    let walk = Walk {
        student,
        teacher,
        s_bucket,
        t_bucket,
        max_len,
    };
    let kl = walk.value(None, 0, 1.0, &mut grad);
    Ok((kl, grad))
}

/// Exact expectation over trajectories of `sum_t A(tau) * grad log pi(o_t | ctx_t)`
/// with `A(tau)` the aggregated distillation return broadcast to every token.
///
/// Under [`ReturnAggregation::Sum`] this equals the negative reverse-KL gradient.
pub fn expected_policy_gradient(
    student: &TabularPolicy,
    teacher: &TabularPolicy,
    prompt_tokens: &[TokenId],
    max_len: usize,
    aggregation: ReturnAggregation,
) -> Result<LogitGradient> {
    check_pair(student, teacher)?;
    let mut grad = LogitGradient::zeros(student);
    let mut failure = None;
    enumerate_trajectories(
        student,
        prompt_tokens,
        max_len,
        DEFAULT_ENUMERATION_BUDGET,
        |tokens, log_p| {
            let scored = score_tokens(student, prompt_tokens, tokens)
                .and_then(|s| Ok((s, score_tokens(teacher, prompt_tokens, tokens)?)));
            let (ls, lt) = match scored {
                Ok(v) => v,
                Err(e) => {
                    failure = Some(e);
                    return;
                }
            };
            let rewards: Vec<f64> = lt
                .iter()
                .zip(&ls)
                .map(|(&t, &s)| token_reward(t, s).expect("clamped log-probs are finite"))
                .collect();
            let sum: f64 = rewards.iter().sum();
            let ret = match aggregation {
                ReturnAggregation::Sum => sum,
                ReturnAggregation::Mean => sum / rewards.len() as f64,
            };
            let weight = log_p.exp() * ret;
            for (ctx, &tok) in student.contexts_along(prompt_tokens, tokens).into_iter().zip(tokens) {
                grad.add_log_prob_grad(student, ctx, tok, weight);
            }
        },
    )?;
    match failure {
        Some(e) => Err(e),
        None => Ok(grad),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::tabular::ContextOrder;

    fn one_step(p0: f64) -> TabularPolicy {
        let logits = vec![p0.ln(), (1.0 - p0).ln()];
        TabularPolicy::from_logits(2, ContextOrder::Unigram, 1, 1, logits).unwrap()
    }

    #[test]
    fn closed_form_one_step() {
        let student = one_step(0.5);
        let teacher = one_step(0.9);
        let kl = exact_reverse_kl(&student, &teacher, &[], 1).unwrap();
        let want = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((kl - want).abs() < 1e-12);
        assert!((kl - 0.5108).abs() < 1e-4);
    }

    #[test]
    fn identical_policies_have_zero_kl() {
        let mut p = TabularPolicy::uniform(3, ContextOrder::Bigram, 1, 2).unwrap();
        p.logits_mut()
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = (i % 4) as f64 * 0.3);
        assert!(exact_reverse_kl(&p, &p, &[0], 4).unwrap().abs() < 1e-12);
    }

    #[test]
    fn trajectory_probabilities_sum_to_one() {
        let mut p = TabularPolicy::uniform(4, ContextOrder::Bigram, 1, 3).unwrap();
        p.logits_mut()
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = (i % 5) as f64 * 0.2);
        let mut total = 0.0;
        let mut count = 0;
        enumerate_trajectories(&p, &[1], 3, DEFAULT_ENUMERATION_BUDGET, |_, lp| {
            total += lp.exp();
            count += 1;
        })
        .unwrap();
        assert!((total - 1.0).abs() < 1e-12);
        // 1 + 3 + 9 terminated early, 27 truncated
        assert_eq!(count, 1 + 3 + 9 + 27);
    }

    #[test]
    fn oversized_enumeration_is_refused() {
        let p = TabularPolicy::uniform(10, ContextOrder::Bigram, 1, 9).unwrap();
        let err = exact_reverse_kl_with_budget(&p, &p, &[], 8, 1000);
        assert!(matches!(err, Err(OpdError::OracleScale { .. })));
    }
}
