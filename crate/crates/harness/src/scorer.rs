use opd_core::policy::{ensemble_teacher_logprobs, TeacherEnsemble};
use opd_core::{Prompt, TokenId};
use opd_serving::TeacherClient;

use crate::error::Result;

/// Source of per-token teacher log-probs.
pub trait TeacherScorer: Sync {
    fn score(&self, prompt: &Prompt, response: &[TokenId]) -> Result<Vec<f64>>;
}

impl TeacherScorer for TeacherEnsemble {
    fn score(&self, prompt: &Prompt, response: &[TokenId]) -> Result<Vec<f64>> {
        Ok(ensemble_teacher_logprobs(self, prompt, response)?)
    }
}

impl TeacherScorer for TeacherClient {
    fn score(&self, prompt: &Prompt, response: &[TokenId]) -> Result<Vec<f64>> {
        Ok(self.score_remote(prompt, response)?)
    }
}
