//! The "sorted digits" toy task: the prompt is a set of digits and the
//! correct response lists them in non-decreasing order, then the terminator.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;

use super::tabular::{prompt_bucket, ContextOrder, TabularPolicy};
use crate::error::{OpdError, Result};
use crate::rng::seeded_rng;
use crate::rollout::{OutcomeReward, Prompt, TokenId};

/// Judges a response for a prompt.
pub trait Verifier {
    fn verify(&self, prompt: &Prompt, response: &[TokenId]) -> Result<OutcomeReward>;
}

/// Digits `0..digits` plus a terminator token with id `digits`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SortedDigits {
    pub digits: usize,
}

impl SortedDigits {
    pub fn new(digits: usize) -> Self {
        Self { digits }
    }

    pub fn terminator(&self) -> TokenId {
        self.digits as TokenId
    }

    pub fn vocab_size(&self) -> usize {
        self.digits + 1
    }

    /// Canonical correct response including the terminator.
    pub fn answer(&self, prompt_tokens: &[TokenId]) -> Vec<TokenId> {
        let mut out = prompt_tokens.to_vec();
        out.sort_unstable();
        out.push(self.terminator());
        out
    }

    pub fn prompt(&self, id: impl Into<String>, domain: impl Into<String>, tokens: Vec<TokenId>) -> Prompt {
        let mut target = tokens.clone();
        target.sort_unstable();
        Prompt::new(id, domain, tokens).with_target(target)
    }

    /// Draws `count` prompts of distinct digits whose sizes lie in
    /// `min_size..=max_size`, with no two prompts sharing a digit set or a
    /// hash bucket. The domain of each prompt is chosen by `domain_of(size)`.
    pub fn generate(
        &self,
        count: usize,
        min_size: usize,
        max_size: usize,
        bucket_count: usize,
        seed: u64,
        domain_of: impl Fn(usize) -> String,
    ) -> Result<Vec<Prompt>> {
        if min_size == 0 || min_size > max_size || max_size > self.digits {
            return Err(OpdError::InvalidConfig(format!(
                "prompt sizes {min_size}..={max_size} invalid for {} digits",
                self.digits
            )));
        }
        let mut rng = seeded_rng(seed);
        let mut seen_sets = HashSet::new();
        let mut seen_buckets = HashSet::new();
        let mut out = Vec::with_capacity(count);
        let mut attempts = 0usize;
        let all: Vec<TokenId> = (0..self.digits as TokenId).collect();
        while out.len() < count {
            attempts += 1;
            if attempts > count * 1000 + 10_000 {
                return Err(OpdError::InvalidConfig(format!(
                    "could not draw {count} distinct prompts (got {})",
                    out.len()
                )));
            }
            let size = rng.random_range(min_size..=max_size);
            let mut pool = all.clone();
            pool.shuffle(&mut rng);
            let tokens: Vec<TokenId> = pool[..size].to_vec();
            let mut key = tokens.clone();
            key.sort_unstable();
            let bucket = prompt_bucket(&tokens, bucket_count);
            if seen_sets.contains(&key) || seen_buckets.contains(&bucket) {
                continue;
            }
            seen_sets.insert(key);
            seen_buckets.insert(bucket);
            let id = format!("q{:04}", out.len());
            out.push(self.prompt(id, domain_of(size), tokens));
        }
        Ok(out)
    }

    /// Bigram policy whose logits favor each prompt's sorted continuation by
    /// `sharpness` nats over every other token.
    pub fn expert(&self, prompts: &[Prompt], bucket_count: usize, sharpness: f64) -> Result<TabularPolicy> {
        let mut policy =
            TabularPolicy::uniform(self.vocab_size(), ContextOrder::Bigram, bucket_count, self.terminator())?;
        for prompt in prompts {
            let bucket = policy.bucket_of(&prompt.tokens);
            let mut prev = None;
            for tok in self.answer(&prompt.tokens) {
                let ctx = policy.context(bucket, prev);
                policy.row_mut(ctx)[tok as usize] = sharpness;
                prev = Some(tok);
            }
        }
        Ok(policy)
    }

    /// Expert with `sharpness` plus uniform logit noise in `[-noise, noise]`.
    pub fn noisy_expert(
        &self,
        prompts: &[Prompt],
        bucket_count: usize,
        sharpness: f64,
        noise: f64,
        seed: u64,
    ) -> Result<TabularPolicy> {
        let mut policy = self.expert(prompts, bucket_count, sharpness)?;
        if noise > 0.0 {
            let mut rng = seeded_rng(seed);
            for v in policy.logits_mut() {
                *v += rng.random_range(-noise..=noise);
            }
        }
        Ok(policy)
    }
}

impl Verifier for SortedDigits {
    fn verify(&self, prompt: &Prompt, response: &[TokenId]) -> Result<OutcomeReward> {
        let target = prompt
            .target
            .as_ref()
            .ok_or_else(|| OpdError::MissingTarget(prompt.id.clone()))?;
        let mut expected = prompt.tokens.clone();
        expected.sort_unstable();
        if &expected != target {
            return Err(OpdError::Profiling {
                prompt_id: prompt.id.clone(),
                reason: format!("target {target:?} is not the sorted prompt {expected:?}"),
            });
        }
        let correct = response.len() == target.len() + 1
            && response[..target.len()] == target[..]
            && response[target.len()] == self.terminator();
        Ok(OutcomeReward::binary(correct))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::sampling::{sample_trajectory, SamplingParams};

    #[test]
    fn verifier_examples() {
        let task = SortedDigits::new(10);
        let p = task.prompt("p", "d", vec![5, 1, 3]);
        let eos = task.terminator();
        assert_eq!(task.verify(&p, &[1, 3, 5, eos]).unwrap().value, 1.0);
        assert_eq!(task.verify(&p, &[3, 1, 5, eos]).unwrap().value, 0.0);
        assert_eq!(task.verify(&p, &[1, 3, 5]).unwrap().value, 0.0);
        assert_eq!(task.verify(&p, &[1, 3, 5, eos, eos]).unwrap().value, 0.0);
        let bare = Prompt::new("bare", "d", vec![1]);
        assert!(matches!(task.verify(&bare, &[1, eos]), Err(OpdError::MissingTarget(_))));
        let wrong = Prompt::new("w", "d", vec![2, 1]).with_target(vec![2, 1]);
        assert!(matches!(
            task.verify(&wrong, &[1, 2, eos]),
            Err(OpdError::Profiling { .. })
        ));
    }

    #[test]
    fn repeated_digits_are_handled() {
        let task = SortedDigits::new(10);
        let p = task.prompt("p", "d", vec![4, 1, 4]);
        assert_eq!(task.verify(&p, &[1, 4, 4, 10]).unwrap().value, 1.0);
    }

    #[test]
    fn generated_prompts_are_distinct() {
        let task = SortedDigits::new(8);
        let prompts = task.generate(40, 1, 4, 256, 3, |s| format!("size{s}")).unwrap();
        assert_eq!(prompts.len(), 40);
        let buckets: HashSet<_> = prompts.iter().map(|p| prompt_bucket(&p.tokens, 256)).collect();
        assert_eq!(buckets.len(), 40);
        for p in &prompts {
            assert!((1..=4).contains(&p.tokens.len()));
            assert_eq!(p.domain, format!("size{}", p.tokens.len()));
        }
    }

    #[test]
    fn sharp_expert_solves_its_prompts() {
        let task = SortedDigits::new(8);
        let prompts = task.generate(20, 1, 4, 256, 5, |_| "d".into()).unwrap();
        let expert = task.expert(&prompts, 256, 40.0).unwrap();
        for (i, p) in prompts.iter().enumerate() {
            let r = sample_trajectory(&expert, &p.tokens, 5, i as u64, &SamplingParams::exact()).unwrap();
            assert_eq!(task.verify(p, &r.tokens).unwrap().value, 1.0);
        }
    }
}
