//! The training loop: weighted prompt sampling, group rollouts, teacher
//! scoring, online filtering, calibration, advantage broadcast and one
//! policy-gradient step per iteration.

use std::time::{Duration, Instant};

use opd_core::balance::{plan_online_filter, weighted_prompt_sample, BalanceConfig};
use opd_core::calibration::{calibrate, meets_target, CalibrationConfig, ScoredGroup};
use opd_core::policy::{
    broadcast_advantages, ensemble_reverse_kl, policy_gradient_step, sample_trajectory, BatchItem, ReturnAggregation,
    SamplingParams, TabularPolicy, TeacherEnsemble, Verifier,
};
use opd_core::rng::derive_seed;
use opd_core::rollout::trajectory_return;
use opd_core::{Prompt, RolloutGroup};

use crate::config::TrainConfig;
use crate::error::Result;
use crate::metrics::StepMetrics;
use crate::scorer::TeacherScorer;

pub struct TrainInputs<'a> {
    pub dataset: &'a [Prompt],
    /// Sampling weight per prompt; uniform when `None`.
    pub prompt_weights: Option<&'a [f64]>,
    pub scorer: &'a dyn TeacherScorer,
    pub verifier: &'a dyn Verifier,
    pub train: TrainConfig,
    pub calibration: CalibrationConfig,
    pub balance: BalanceConfig,
    pub online_filtering: bool,
}

/// Everything needed for one update, before it is applied.
#[derive(Debug, Clone)]
pub struct PreparedStep {
    pub items: Vec<BatchItem>,
    pub metrics: StepMetrics,
    pub rollout_time: Duration,
    pub calibration_time: Duration,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: TabularPolicy,
    pub metrics: Vec<StepMetrics>,
    /// Rollout plus teacher scoring.
    pub rollout_time: Duration,
    /// Online filter plus calibration.
    pub calibration_time: Duration,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

pub fn prepare_step(policy: &TabularPolicy, inputs: &TrainInputs, step: usize) -> Result<PreparedStep> {
    let cfg = &inputs.train;
    let seed = cfg.seed;
    let step_id = step as u64;
    let uniform;
    let weights = match inputs.prompt_weights {
        Some(w) => w,
        None => {
            uniform = vec![1.0; inputs.dataset.len()];
            &uniform
        }
    };

    let started = Instant::now();
    let picks = weighted_prompt_sample(weights, cfg.batch_prompts, derive_seed(seed, &[step_id, 0]))?;
    let mut groups = Vec::with_capacity(picks.len());
    let mut group_returns = Vec::with_capacity(picks.len());
    let (mut entropy_sum, mut token_count, mut correct) = (0.0, 0usize, 0usize);
    for (b, &p) in picks.iter().enumerate() {
        let prompt = &inputs.dataset[p];
        let mut trajectories = Vec::with_capacity(cfg.group_size);
        let mut returns = Vec::with_capacity(cfg.group_size);
        for i in 0..cfg.group_size {
            let rollout = sample_trajectory(
                policy,
                &prompt.tokens,
                cfg.max_response_length,
                derive_seed(seed, &[step_id, 1, b as u64, i as u64]),
                &SamplingParams::exact(),
            )?;
            entropy_sum += rollout.entropies.iter().sum::<f64>();
            token_count += rollout.len();
            let teacher = inputs.scorer.score(prompt, &rollout.tokens)?;
            let outcome = inputs.verifier.verify(prompt, &rollout.tokens)?;
            correct += outcome.is_positive() as usize;
            let trajectory = rollout.into_trajectory(teacher, outcome)?;
            let mean = trajectory_return(&trajectory)?.value;
            returns.push(match cfg.return_aggregation {
                ReturnAggregation::Mean => mean,
                ReturnAggregation::Sum => mean * trajectory.len() as f64,
            });
            trajectories.push(trajectory);
        }
        groups.push(RolloutGroup::new(prompt.clone(), trajectories));
        group_returns.push(returns);
    }
    let rollout_time = started.elapsed();
    let sampled = (picks.len() * cfg.group_size) as f64;

    let started = Instant::now();
    let labels: Vec<Vec<bool>> = groups.iter().map(RolloutGroup::labels).collect();
    let keep: Vec<Vec<bool>> = if inputs.online_filtering {
        plan_online_filter(&labels, &inputs.balance, derive_seed(seed, &[step_id, 2]))?.keep
    } else {
        labels.iter().map(|l| vec![true; l.len()]).collect()
    };
    let mut calibrated = Vec::with_capacity(groups.len());
    for (((group, keep), labels), returns) in groups.iter().zip(&keep).zip(&labels).zip(&group_returns) {
        let kept: Vec<usize> = (0..group.len()).filter(|&i| keep[i]).collect();
        if kept.is_empty() {
            continue;
        }
        let returns = kept.iter().map(|&i| returns[i]).collect();
        let scored = ScoredGroup::new(returns, kept.iter().map(|&i| labels[i]).collect());
        calibrated.push((group, kept, calibrate(&scored, &inputs.calibration)?));
    }
    let calibration_time = started.elapsed();

    let delta = inputs.calibration.target_margin;
    let mode = inputs.calibration.mode;
    let violates = |m: Option<f64>| m.is_some_and(|m| !meets_target(m, delta));
    let (mut raw_sum, mut cal_sum, mut kept_count, mut total, mut masked) = (0.0, 0.0, 0usize, 0usize, 0usize);
    let (mut before, mut after) = (0usize, 0usize);
    let mut items = Vec::new();
    for (group, kept, cal) in &calibrated {
        before += violates(cal.margin_before) as usize;
        after += violates(cal.margin_after(mode)) as usize;
        let lengths: Vec<usize> = kept.iter().map(|&i| group.trajectories[i].len()).collect();
        let advantages = broadcast_advantages(cal, &lengths);
        for (i, (&j, adv)) in kept.iter().zip(advantages).enumerate() {
            let t = &group.trajectories[j];
            total += 1;
            raw_sum += cal.source.returns[i];
            if cal.keep_mask[i] {
                kept_count += 1;
                cal_sum += cal.calibrated_returns[i];
            } else {
                masked += 1;
            }
            items.push(BatchItem {
                prompt_tokens: group.prompt.tokens.clone(),
                tokens: t.tokens.clone(),
                advantages: adv,
                keep: cal.keep_mask[i],
            });
        }
    }
    let n_groups = calibrated.len() as f64;
    let metrics = StepMetrics {
        step,
        correct_ratio: ratio(correct as f64, sampled),
        mean_entropy: ratio(entropy_sum, token_count as f64),
        mean_response_length: ratio(token_count as f64, sampled),
        mean_raw_return: ratio(raw_sum, total as f64),
        mean_calibrated_return: ratio(cal_sum, kept_count as f64),
        margin_violation_rate: ratio(before as f64, n_groups),
        calibrated_violation_rate: ratio(after as f64, n_groups),
        masked_fraction: ratio(masked as f64, total as f64),
    };
    Ok(PreparedStep {
        items,
        metrics,
        rollout_time,
        calibration_time,
    })
}

/// Runs `train.total_steps` updates, handing each step's metrics to `on_step`.
pub fn train(
    student: TabularPolicy,
    inputs: &TrainInputs,
    mut on_step: impl FnMut(&StepMetrics) -> Result<()>,
) -> Result<TrainOutcome> {
    let mut policy = student;
    let mut metrics = Vec::with_capacity(inputs.train.total_steps);
    let mut rollout_time = Duration::ZERO;
    let mut calibration_time = Duration::ZERO;
    for step in 0..inputs.train.total_steps {
        let prepared = prepare_step(&policy, inputs, step)?;
        policy = policy_gradient_step(&policy, &prepared.items, inputs.train.learning_rate);
        rollout_time += prepared.rollout_time;
        calibration_time += prepared.calibration_time;
        on_step(&prepared.metrics)?;
        metrics.push(prepared.metrics);
    }
    Ok(TrainOutcome {
        policy,
        metrics,
        rollout_time,
        calibration_time,
    })
}

/// Mean over prompts of the exact reverse KL to each prompt's teacher(s).
pub fn dataset_reverse_kl(
    student: &TabularPolicy,
    ensemble: &TeacherEnsemble,
    dataset: &[Prompt],
    max_len: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for prompt in dataset {
        total += ensemble_reverse_kl(student, ensemble, prompt, max_len)?;
    }
    Ok(ratio(total, dataset.len() as f64))
}
