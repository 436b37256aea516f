//! Desk-scale student and teacher policies.

pub mod checkpoint;
pub mod ensemble;
pub mod gradient;
pub mod kl;
pub mod sampling;
pub mod tabular;
pub mod task;

pub use ensemble::{ensemble_teacher_logprobs, EnsembleMode, TeacherEnsemble};
pub use gradient::{
    apply_gradient, broadcast_advantages, policy_gradient_step, surrogate_gradient, surrogate_objective, BatchItem,
    LogitGradient, TokenAdvantage,
};
pub use kl::{ensemble_reverse_kl, exact_reverse_kl, expected_policy_gradient, reverse_kl_gradient, ReturnAggregation};
pub use sampling::{sample_trajectory, Rollout, SamplingParams};
pub use tabular::{score_tokens, ContextOrder, TabularPolicy};
pub use task::{SortedDigits, Verifier};
