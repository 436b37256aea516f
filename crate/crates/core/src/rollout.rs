//! Token-level distillation rewards, trajectory returns and outcome partitions.
//!
//! A student rollout is scored token by token as the log-ratio between the
//! teacher and the student. Averaging those rewards over the response gives
//! the trajectory return used for calibration and as the broadcast advantage.

use serde::{Deserialize, Serialize};

use crate::error::{OpdError, Result};

/// Log-probabilities below this many nats are clamped before scoring.
pub const LOGPROB_FLOOR: f64 = -30.0;

/// Token identifier in the toy vocabulary.
pub type TokenId = u32;

/// A dataset prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: String,
    /// Routing key used to pick a teacher.
    pub domain: String,
    #[serde(rename = "prompt_tokens")]
    pub tokens: Vec<TokenId>,
    /// Canonical answer (response without the terminator).
    #[serde(default)]
    pub target: Option<Vec<TokenId>>,
}

impl Prompt {
    pub fn new(id: impl Into<String>, domain: impl Into<String>, tokens: Vec<TokenId>) -> Self {
        Self {
            id: id.into(),
            domain: domain.into(),
            tokens,
            target: None,
        }
    }

    pub fn with_target(mut self, target: Vec<TokenId>) -> Self {
        self.target = Some(target);
        self
    }
}

/// Outcome reward of a rollout, possibly soft.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeReward {
    pub value: f64,
    pub threshold: f64,
}

impl OutcomeReward {
    /// A binary reward (`threshold = 1`).
    pub fn binary(correct: bool) -> Self {
        Self {
            value: if correct { 1.0 } else { 0.0 },
            threshold: 1.0,
        }
    }

    pub fn soft(value: f64, threshold: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) {
            return Err(OpdError::InvalidConfig(format!("outcome value {value} outside [0, 1]")));
        }
        if !(threshold > 0.0 && threshold <= 1.0) {
            return Err(OpdError::InvalidConfig(format!(
                "outcome threshold {threshold} outside (0, 1]"
            )));
        }
        Ok(Self { value, threshold })
    }

    pub fn is_positive(&self) -> bool {
        self.value >= self.threshold
    }
}

/// Clamp a log-probability to [`LOGPROB_FLOOR`]. `-inf` (zero mass) maps to the floor.
pub fn clamp_logprob(logprob: f64) -> Result<f64> {
    if logprob.is_nan() || logprob == f64::INFINITY {
        return Err(OpdError::InvalidLogprob { value: logprob });
    }
    Ok(logprob.max(LOGPROB_FLOOR))
}

/// One sampled response with per-token student and teacher log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub tokens: Vec<TokenId>,
    pub student_logprobs: Vec<f64>,
    pub teacher_logprobs: Vec<f64>,
    pub outcome: OutcomeReward,
}

impl Trajectory {
    /// Builds a trajectory, clamping every log-prob to the floor.
    pub fn new(
        tokens: Vec<TokenId>,
        student_logprobs: Vec<f64>,
        teacher_logprobs: Vec<f64>,
        outcome: OutcomeReward,
    ) -> Result<Self> {
        if tokens.is_empty() {
            return Err(OpdError::DegenerateTrajectory("no response tokens".into()));
        }
        if tokens.len() != student_logprobs.len() || tokens.len() != teacher_logprobs.len() {
            return Err(OpdError::DegenerateTrajectory(format!(
                "length mismatch: {} tokens, {} student log-probs, {} teacher log-probs",
                tokens.len(),
                student_logprobs.len(),
                teacher_logprobs.len()
            )));
        }
        let student_logprobs = student_logprobs
            .into_iter()
            .map(clamp_logprob)
            .collect::<Result<Vec<_>>>()?;
        let teacher_logprobs = teacher_logprobs
            .into_iter()
            .map(clamp_logprob)
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            tokens,
            student_logprobs,
            teacher_logprobs,
            outcome,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Per-token rewards `log pi_T - log pi_theta`.
    pub fn token_rewards(&self) -> Result<Vec<f64>> {
        self.teacher_logprobs
            .iter()
            .zip(&self.student_logprobs)
            .map(|(&t, &s)| token_reward(t, s))
            .collect()
    }
}

/// Length-normalized teacher/student log-prob gap of one trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryReturn {
    pub value: f64,
}

/// Token-level distillation reward: teacher log-prob minus student log-prob.
pub fn token_reward(teacher_logprob: f64, student_logprob: f64) -> Result<f64> {
    if !teacher_logprob.is_finite() {
        return Err(OpdError::InvalidLogprob { value: teacher_logprob });
    }
    if !student_logprob.is_finite() {
        return Err(OpdError::InvalidLogprob { value: student_logprob });
    }
    Ok(teacher_logprob - student_logprob)
}

/// Mean token reward over every response token, terminator included.
pub fn trajectory_return(trajectory: &Trajectory) -> Result<TrajectoryReturn> {
    if trajectory.is_empty() {
        return Err(OpdError::DegenerateTrajectory("no response tokens".into()));
    }
    let mut sum = 0.0;
    for (&t, &s) in trajectory.teacher_logprobs.iter().zip(&trajectory.student_logprobs) {
        sum += token_reward(t, s)?;
    }
    Ok(TrajectoryReturn {
        value: sum / trajectory.len() as f64,
    })
}

/// Outcome-level return of a trajectory treated as a single macro-action.
pub fn rl_return(outcome: &OutcomeReward) -> f64 {
    outcome.value
}

/// The rollouts of one prompt, split by binarized outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub prompt: Prompt,
    pub trajectories: Vec<Trajectory>,
    pub positive_indices: Vec<usize>,
    pub negative_indices: Vec<usize>,
}

impl RolloutGroup {
    pub fn new(prompt: Prompt, trajectories: Vec<Trajectory>) -> Self {
        let (positive_indices, negative_indices) = partition_outcomes(&trajectories);
        Self {
            prompt,
            trajectories,
            positive_indices,
            negative_indices,
        }
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Trajectory returns in rollout order.
    pub fn returns(&self) -> Result<Vec<f64>> {
        self.trajectories
            .iter()
            .map(|t| trajectory_return(t).map(|r| r.value))
            .collect()
    }

    pub fn labels(&self) -> Vec<bool> {
        self.trajectories.iter().map(|t| t.outcome.is_positive()).collect()
    }
}

fn partition_outcomes(trajectories: &[Trajectory]) -> (Vec<usize>, Vec<usize>) {
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for (i, t) in trajectories.iter().enumerate() {
        if t.outcome.is_positive() {
            positives.push(i);
        } else {
            negatives.push(i);
        }
    }
    (positives, negatives)
}

/// Recomputes the positive/negative split from each trajectory's outcome.
pub fn partition_group(group: &RolloutGroup) -> (Vec<usize>, Vec<usize>) {
    partition_outcomes(&group.trajectories)
}

/// Result of checking that every positive return dominates every negative one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrderReport {
    pub is_consistent: bool,
    /// Largest `negative - positive` gap over all pairs, 0 when consistent.
    pub worst_violation: f64,
}

/// Order-consistency check over precomputed returns and labels.
pub fn order_consistency(returns: &[f64], labels: &[bool]) -> OrderReport {
    let min_pos = returns
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(&r, _)| r)
        .fold(f64::INFINITY, f64::min);
    let max_neg = returns
        .iter()
        .zip(labels)
        .filter(|(_, &l)| !l)
        .map(|(&r, _)| r)
        .fold(f64::NEG_INFINITY, f64::max);
    if !min_pos.is_finite() || !max_neg.is_finite() {
        return OrderReport {
            is_consistent: true,
            worst_violation: 0.0,
        };
    }
    let gap = max_neg - min_pos;
    OrderReport {
        is_consistent: gap <= 0.0,
        worst_violation: gap.max(0.0),
    }
}

pub fn check_order_consistency(group: &RolloutGroup) -> Result<OrderReport> {
    Ok(order_consistency(&group.returns()?, &group.labels()))
}
