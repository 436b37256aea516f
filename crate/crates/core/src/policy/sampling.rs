//! Ancestral sampling from tabular policies.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tabular::{log_softmax, TabularPolicy};
use crate::error::{OpdError, Result};
use crate::rng::seeded_rng;
use crate::rollout::{clamp_logprob, OutcomeReward, TokenId, Trajectory};

/// Decoding parameters. `top_k` is clamped to the vocabulary size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: Option<usize>,
}

impl SamplingParams {
    /// Plain sampling from the policy distribution.
    pub fn exact() -> Self {
        Self {
            temperature: 1.0,
            top_p: 1.0,
            top_k: None,
        }
    }

    /// Temperature 1.0, top-p 0.95, top-k 50.
    pub fn offline_profiling() -> Self {
        Self {
            temperature: 1.0,
            top_p: 0.95,
            top_k: Some(50),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(OpdError::InvalidConfig(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(OpdError::InvalidConfig(format!(
                "top-p must lie in (0, 1], got {}",
                self.top_p
            )));
        }
        if self.top_k == Some(0) {
            return Err(OpdError::InvalidConfig("top-k must be positive".into()));
        }
        Ok(())
    }

    fn is_exact(&self) -> bool {
        self.temperature == 1.0 && self.top_p >= 1.0 && self.top_k.is_none()
    }
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self::exact()
    }
}

/// A sampled response before teacher scoring and verification.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub tokens: Vec<TokenId>,
    /// Floor-clamped log-probs of each sampled token under the untruncated policy.
    pub student_logprobs: Vec<f64>,
    /// Entropy (nats) of the policy distribution at each sampled position.
    pub entropies: Vec<f64>,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn terminated(&self, terminator: TokenId) -> bool {
        self.tokens.last() == Some(&terminator)
    }

    pub fn into_trajectory(self, teacher_logprobs: Vec<f64>, outcome: OutcomeReward) -> Result<Trajectory> {
        Trajectory::new(self.tokens, self.student_logprobs, teacher_logprobs, outcome)
    }
}

fn sampling_distribution(row: &[f64], params: &SamplingParams) -> Vec<f64> {
    let scaled: Vec<f64> = row.iter().map(|&x| x / params.temperature).collect();
    let mut probs: Vec<f64> = log_softmax(&scaled).into_iter().map(f64::exp).collect();
    if params.top_p >= 1.0 && params.top_k.is_none() {
        return probs;
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let k = params.top_k.unwrap_or(probs.len()).min(probs.len());
    let mut keep = 0;
    let mut mass = 0.0;
    for &tok in order.iter().take(k) {
        keep += 1;
        mass += probs[tok];
        if mass >= params.top_p {
            break;
        }
    }
    for &tok in &order[keep..] {
        probs[tok] = 0.0;
    }
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    probs
}

fn draw(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (tok, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = tok;
        if u < acc {
            return tok;
        }
    }
    last
}

/// Samples one response until the terminator or `max_len` tokens.
pub fn sample_trajectory(
    policy: &TabularPolicy,
    prompt_tokens: &[TokenId],
    max_len: usize,
    seed: u64,
    params: &SamplingParams,
) -> Result<Rollout> {
    if max_len == 0 {
        return Err(OpdError::InvalidConfig("max_len must be at least 1".into()));
    }
    params.validate()?;
    let mut rng = seeded_rng(seed);
    let bucket = policy.bucket_of(prompt_tokens);
    let mut out = Rollout {
        tokens: Vec::with_capacity(max_len),
        student_logprobs: Vec::with_capacity(max_len),
        entropies: Vec::with_capacity(max_len),
    };
    let mut prev = None;
    while out.tokens.len() < max_len {
        let ctx = policy.context(bucket, prev);
        let log_probs = log_softmax(policy.row(ctx));
        let probs = if params.is_exact() {
            log_probs.iter().map(|lp| lp.exp()).collect()
        } else {
            sampling_distribution(policy.row(ctx), params)
        };
        let tok = draw(&probs, rng.random::<f64>());
        out.entropies.push(
            log_probs
                .iter()
                .map(|&lp| if lp.exp() > 0.0 { -lp.exp() * lp } else { 0.0 })
                .sum(),
        );
        out.student_logprobs.push(clamp_logprob(log_probs[tok])?);
        out.tokens.push(tok as TokenId);
        if tok as TokenId == policy.terminator() {
            break;
        }
        prev = Some(tok as TokenId);
    }
    Ok(out)
}
