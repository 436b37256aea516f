//! Tabular softmax sequence policies.

use serde::{Deserialize, Serialize};

use crate::error::{OpdError, Result};
use crate::rollout::{clamp_logprob, TokenId};

/// Conditioning used by a [`TabularPolicy`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextOrder {
    /// One distribution per prompt bucket.
    Unigram,
    /// One distribution per (prompt bucket, previous token or start).
    Bigram,
}

impl ContextOrder {
    pub fn as_int(self) -> u32 {
        match self {
            ContextOrder::Unigram => 0,
            ContextOrder::Bigram => 1,
        }
    }

    pub fn from_int(order: u32) -> Result<Self> {
        match order {
            0 => Ok(ContextOrder::Unigram),
            1 => Ok(ContextOrder::Bigram),
            other => Err(OpdError::InvalidConfig(format!(
                "context order must be 0 or 1, got {other}"
            ))),
        }
    }
}

/// Softmax policy over a small vocabulary with one logit row per context.
///
/// The prompt enters only through its hash bucket (FNV-1a over the token
/// ids, modulo `bucket_count`).
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    vocab_size: usize,
    order: ContextOrder,
    bucket_count: usize,
    terminator: TokenId,
    logits: Vec<f64>,
}

/// Index of a logit row.
pub type ContextId = usize;

impl TabularPolicy {
    /// All-zero logits, i.e. the uniform policy.
    pub fn uniform(vocab_size: usize, order: ContextOrder, bucket_count: usize, terminator: TokenId) -> Result<Self> {
        if vocab_size < 2 {
            return Err(OpdError::InvalidConfig(format!(
                "vocabulary needs at least 2 tokens, got {vocab_size}"
            )));
        }
        if bucket_count == 0 {
            return Err(OpdError::InvalidConfig("bucket count must be positive".into()));
        }
        if terminator as usize >= vocab_size {
            return Err(OpdError::OutOfVocabulary {
                token: terminator,
                vocab_size,
            });
        }
        let contexts = Self::context_count_for(vocab_size, order, bucket_count);
        Ok(Self {
            vocab_size,
            order,
            bucket_count,
            terminator,
            logits: vec![0.0; contexts * vocab_size],
        })
    }

    pub fn from_logits(
        vocab_size: usize,
        order: ContextOrder,
        bucket_count: usize,
        terminator: TokenId,
        logits: Vec<f64>,
    ) -> Result<Self> {
        let mut policy = Self::uniform(vocab_size, order, bucket_count, terminator)?;
        if logits.len() != policy.logits.len() {
            return Err(OpdError::InvalidConfig(format!(
                "expected {} logits, got {}",
                policy.logits.len(),
                logits.len()
            )));
        }
        if let Some(bad) = logits.iter().find(|v| !v.is_finite()) {
            return Err(OpdError::InvalidConfig(format!("non-finite logit {bad}")));
        }
        policy.logits = logits;
        Ok(policy)
    }

    fn context_count_for(vocab_size: usize, order: ContextOrder, bucket_count: usize) -> usize {
        match order {
            ContextOrder::Unigram => bucket_count,
            ContextOrder::Bigram => bucket_count * (vocab_size + 1),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn order(&self) -> ContextOrder {
        self.order
    }

    pub fn bucket_count(&self) -> usize {
        self.bucket_count
    }

    pub fn terminator(&self) -> TokenId {
        self.terminator
    }

    pub fn context_count(&self) -> usize {
        Self::context_count_for(self.vocab_size, self.order, self.bucket_count)
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn row(&self, ctx: ContextId) -> &[f64] {
        &self.logits[ctx * self.vocab_size..(ctx + 1) * self.vocab_size]
    }

    pub fn row_mut(&mut self, ctx: ContextId) -> &mut [f64] {
        let v = self.vocab_size;
        &mut self.logits[ctx * v..(ctx + 1) * v]
    }

    /// Prompt bucket: FNV-1a over little-endian token bytes.
    pub fn bucket_of(&self, prompt_tokens: &[TokenId]) -> usize {
        prompt_bucket(prompt_tokens, self.bucket_count)
    }

    /// Row for the next token after `prev` (`None` at the start of the response).
    pub fn context(&self, bucket: usize, prev: Option<TokenId>) -> ContextId {
        match self.order {
            ContextOrder::Unigram => bucket,
            ContextOrder::Bigram => {
                let slot = prev.map_or(self.vocab_size, |t| t as usize);
                bucket * (self.vocab_size + 1) + slot
            }
        }
    }

    pub fn check_token(&self, token: TokenId) -> Result<()> {
        if (token as usize) < self.vocab_size {
            Ok(())
        } else {
            Err(OpdError::OutOfVocabulary {
                token,
                vocab_size: self.vocab_size,
            })
        }
    }

    /// Exact (unclamped) log-softmax of one row.
    pub fn log_probs(&self, ctx: ContextId) -> Vec<f64> {
        log_softmax(self.row(ctx))
    }

    pub fn probs(&self, ctx: ContextId) -> Vec<f64> {
        self.log_probs(ctx).into_iter().map(f64::exp).collect()
    }

    /// Shannon entropy in nats of one row.
    pub fn entropy(&self, ctx: ContextId) -> f64 {
        self.log_probs(ctx)
            .iter()
            .map(|&lp| {
                let p = lp.exp();
                if p > 0.0 {
                    -p * lp
                } else {
                    0.0
                }
            })
            .sum()
    }

    /// Contexts visited while emitting `response` after `prompt_tokens`.
    pub fn contexts_along(&self, prompt_tokens: &[TokenId], response: &[TokenId]) -> Vec<ContextId> {
        let bucket = self.bucket_of(prompt_tokens);
        let mut prev = None;
        response
            .iter()
            .map(|&tok| {
                let ctx = self.context(bucket, prev);
                prev = Some(tok);
                ctx
            })
            .collect()
    }

    /// Exact log-probs of each response token, without clamping.
    pub fn raw_token_logprobs(&self, prompt_tokens: &[TokenId], response: &[TokenId]) -> Result<Vec<f64>> {
        for &tok in response {
            self.check_token(tok)?;
        }
        Ok(self
            .contexts_along(prompt_tokens, response)
            .into_iter()
            .zip(response)
            .map(|(ctx, &tok)| log_softmax_at(self.row(ctx), tok as usize))
            .collect())
    }
}

/// Floor-clamped per-token log-probabilities of `response` under `policy`.
pub fn score_tokens(policy: &TabularPolicy, prompt_tokens: &[TokenId], response: &[TokenId]) -> Result<Vec<f64>> {
    policy
        .raw_token_logprobs(prompt_tokens, response)?
        .into_iter()
        .map(clamp_logprob)
        .collect()
}

pub fn prompt_bucket(prompt_tokens: &[TokenId], bucket_count: usize) -> usize {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0100_0000_01b3;
    let mut hash = OFFSET;
    for tok in prompt_tokens {
        for byte in tok.to_le_bytes() {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(PRIME);
        }
    }
    (hash % bucket_count as u64) as usize
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(row);
    row.iter().map(|&x| x - lse).collect()
}

fn log_softmax_at(row: &[f64], idx: usize) -> f64 {
    row[idx] - log_sum_exp(row)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_rows_are_proper() {
        let p = TabularPolicy::uniform(4, ContextOrder::Bigram, 3, 3).unwrap();
        assert_eq!(p.context_count(), 15);
        for ctx in 0..p.context_count() {
            let s: f64 = p.probs(ctx).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!((p.entropy(ctx) - 4f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_scores_are_ln_quarter() {
        let p = TabularPolicy::uniform(4, ContextOrder::Bigram, 1, 3).unwrap();
        let lps = score_tokens(&p, &[0, 1], &[2, 0, 3]).unwrap();
        for lp in lps {
            assert!((lp - 0.25f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn off_path_tokens_hit_the_floor() {
        let mut p = TabularPolicy::uniform(3, ContextOrder::Unigram, 1, 2).unwrap();
        p.row_mut(0).copy_from_slice(&[1000.0, 0.0, 0.0]);
        let lps = score_tokens(&p, &[], &[0, 1]).unwrap();
        assert_eq!(lps, vec![0.0, -30.0]);
    }

    #[test]
    fn out_of_vocab_is_rejected() {
        let p = TabularPolicy::uniform(3, ContextOrder::Unigram, 1, 2).unwrap();
        assert!(matches!(
            score_tokens(&p, &[], &[5]),
            Err(OpdError::OutOfVocabulary { token: 5, .. })
        ));
        assert!(TabularPolicy::uniform(1, ContextOrder::Unigram, 1, 0).is_err());
        assert!(TabularPolicy::uniform(3, ContextOrder::Unigram, 1, 3).is_err());
    }

    #[test]
    fn bigram_contexts_track_previous_token() {
        let p = TabularPolicy::uniform(4, ContextOrder::Bigram, 2, 3).unwrap();
        let b = p.bucket_of(&[1, 2]);
        let ctxs = p.contexts_along(&[1, 2], &[0, 2, 3]);
        assert_eq!(
            ctxs,
            vec![p.context(b, None), p.context(b, Some(0)), p.context(b, Some(2))]
        );
    }
}
