//! Advantage broadcasting and the student update.
//!
//! The surrogate objective is the token mean of `A_t * log pi(o_t | ctx)`
//! over every unmasked token in the batch; one update is a gradient ascent
//! step on it with exact softmax gradients.

use serde::{Deserialize, Serialize};

use super::tabular::{ContextId, TabularPolicy};
use crate::calibration::CalibratedGroup;
use crate::rollout::TokenId;

/// Per-token advantages of one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenAdvantage {
    pub values: Vec<f64>,
}

/// Broadcasts `k_i * G~_i` over every token of trajectory `i`.
pub fn broadcast_advantages(calibrated: &CalibratedGroup, lengths: &[usize]) -> Vec<TokenAdvantage> {
    assert_eq!(lengths.len(), calibrated.calibrated_returns.len());
    calibrated
        .calibrated_returns
        .iter()
        .zip(&calibrated.keep_mask)
        .zip(lengths)
        .map(|((&ret, &keep), &len)| TokenAdvantage {
            values: vec![if keep { ret } else { 0.0 }; len],
        })
        .collect()
}

/// One trajectory of an update batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub prompt_tokens: Vec<TokenId>,
    pub tokens: Vec<TokenId>,
    pub advantages: TokenAdvantage,
    /// Masked items contribute neither gradient nor token count.
    pub keep: bool,
}

/// Gradient with the same layout as the policy logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitGradient {
    pub values: Vec<f64>,
}

impl LogitGradient {
    pub fn zeros(policy: &TabularPolicy) -> Self {
        Self {
            values: vec![0.0; policy.logits().len()],
        }
    }

    /// Adds `weight * d log pi(token | ctx) / d logits`.
    pub fn add_log_prob_grad(&mut self, policy: &TabularPolicy, ctx: ContextId, token: TokenId, weight: f64) {
        if weight == 0.0 {
            return;
        }
        let v = policy.vocab_size();
        let probs = policy.probs(ctx);
        let row = &mut self.values[ctx * v..(ctx + 1) * v];
        for (a, (g, p)) in row.iter_mut().zip(probs).enumerate() {
            let indicator = if a == token as usize { 1.0 } else { 0.0 };
            *g += weight * (indicator - p);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|g| *g *= factor);
    }

    pub fn max_abs_diff(&self, other: &LogitGradient) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn unmasked_tokens(batch: &[BatchItem]) -> usize {
    batch.iter().filter(|b| b.keep).map(|b| b.tokens.len()).sum()
}

/// Token-mean of advantage-weighted exact log-probs.
pub fn surrogate_objective(policy: &TabularPolicy, batch: &[BatchItem]) -> f64 {
    let count = unmasked_tokens(batch);
    if count == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for item in batch.iter().filter(|b| b.keep) {
        let lps = policy
            .raw_token_logprobs(&item.prompt_tokens, &item.tokens)
            .expect("batch tokens are in vocabulary");
        total += lps
            .iter()
            .zip(&item.advantages.values)
            .map(|(lp, a)| a * lp)
            .sum::<f64>();
    }
    total / count as f64
}

/// Analytic gradient of [`surrogate_objective`].
pub fn surrogate_gradient(policy: &TabularPolicy, batch: &[BatchItem]) -> LogitGradient {
    let mut grad = LogitGradient::zeros(policy);
    let count = unmasked_tokens(batch);
    if count == 0 {
        return grad;
    }
    for item in batch.iter().filter(|b| b.keep) {
        let ctxs = policy.contexts_along(&item.prompt_tokens, &item.tokens);
        for ((ctx, &tok), &adv) in ctxs.into_iter().zip(&item.tokens).zip(&item.advantages.values) {
            grad.add_log_prob_grad(policy, ctx, tok, adv);
        }
    }
    grad.scale(1.0 / count as f64);
    grad
}

/// Applies `logits += rate * gradient`.
pub fn apply_gradient(policy: &TabularPolicy, grad: &LogitGradient, rate: f64) -> TabularPolicy {
    let mut next = policy.clone();
    for (w, g) in next.logits_mut().iter_mut().zip(&grad.values) {
        *w += rate * g;
    }
    next
}

/// One gradient ascent step on the surrogate objective.
pub fn policy_gradient_step(policy: &TabularPolicy, batch: &[BatchItem], learning_rate: f64) -> TabularPolicy {
    apply_gradient(policy, &surrogate_gradient(policy, batch), learning_rate)
}
