//! Subcommand implementations shared by the binary and the tests.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use opd_core::balance::{
    classify_shape, parse_profile, profile_difficulty, reweight_offline, DifficultyProfile, Shape,
};
use opd_core::calibration::{calibrate, ScoredGroup, Strategy};
use opd_core::passk::pass_at_k;
use opd_core::policy::{checkpoint, sample_trajectory, ReturnAggregation, SamplingParams, Verifier};
use opd_core::rng::derive_seed;
use opd_core::rollout::trajectory_return;
use opd_core::{OpdError, Prompt, TokenId};
use opd_serving::{ClientConfig, RoutingTable, TeacherClient};
use serde::{Deserialize, Serialize};

use crate::config::{load_policy, RunConfig, TeacherMode};
use crate::dataset::load_dataset;
use crate::error::{read_file, write_file, HarnessError, Result};
use crate::metrics::MetricsWriter;
use crate::scorer::TeacherScorer;
use crate::train::{dataset_reverse_kl, train, TrainInputs};

/// Command-line overrides applied on top of the configuration file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub teacher_mode: Option<TeacherMode>,
    pub calibration: Option<Strategy>,
    pub out: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, config: &mut RunConfig) -> Result<()> {
        if let Some(seed) = self.seed {
            config.train.seed = seed;
        }
        if let Some(steps) = self.steps {
            config.train.total_steps = steps;
        }
        if let Some(mode) = self.teacher_mode {
            config.teacher_mode = mode;
        }
        if let Some(strategy) = self.calibration {
            config.calibration.strategy = strategy;
        }
        if let Some(out) = &self.out {
            config.output_dir = out.clone();
        }
        config.validate()
    }
}

fn non_empty_dataset(config: &RunConfig) -> Result<Vec<Prompt>> {
    let dataset = load_dataset(&config.dataset)?;
    if dataset.is_empty() {
        return Err(HarnessError::Config(format!(
            "dataset `{}` is empty",
            config.dataset.display()
        )));
    }
    Ok(dataset)
}

/// Offline profiling, shape detection and reweighting; writes the profile file.
pub fn balance_offline(config: &RunConfig) -> Result<(DifficultyProfile, Shape)> {
    let dataset = non_empty_dataset(config)?;
    let student = config.load_student()?;
    let task = config.task();
    let profile = profile_difficulty(
        &dataset,
        &student,
        &task,
        &config.balance,
        config.train.max_response_length,
        derive_seed(config.train.seed, &[3]),
    )?;
    let shape = config
        .balance
        .shape_override
        .unwrap_or_else(|| classify_shape(&profile.histogram));
    let weighted = reweight_offline(&profile, shape, config.balance.duplication_cap);
    write_file(&config.profile_path(), &weighted.to_jsonl())?;
    Ok((weighted, shape))
}

/// Sampling weights of `dataset` taken from the profile file.
pub fn load_prompt_weights(path: &Path, dataset: &[Prompt]) -> Result<Vec<f64>> {
    if !path.is_file() {
        return Err(HarnessError::Config(format!(
            "difficulty profile `{}` not found; run balance-offline first or disable offline_balancing",
            path.display()
        )));
    }
    let records = parse_profile(&read_file(path)?)?;
    let by_id: HashMap<&str, f64> = records.iter().map(|r| (r.id.as_str(), r.weight)).collect();
    dataset
        .iter()
        .map(|p| {
            by_id
                .get(p.id.as_str())
                .copied()
                .ok_or_else(|| HarnessError::Config(format!("profile has no record for prompt `{}`", p.id)))
        })
        .collect()
}

fn scorer(config: &RunConfig) -> Result<Box<dyn TeacherScorer>> {
    Ok(match config.teacher_mode {
        TeacherMode::Local => Box::new(config.load_ensemble()?),
        TeacherMode::Remote => {
            let path = config.routing_table.as_ref().expect("validated");
            let table = RoutingTable::from_json(&read_file(path)?)?;
            let client = TeacherClient::new(
                table,
                ClientConfig {
                    seed: config.train.seed,
                    ..ClientConfig::default()
                },
            )?;
            Box::new(client)
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub kl_initial: Option<f64>,
    pub kl_final: Option<f64>,
    pub first_correct_ratio: Option<f64>,
    pub last_correct_ratio: Option<f64>,
    pub rollout_seconds: f64,
    pub calibration_seconds: f64,
}

pub fn final_checkpoint_path(config: &RunConfig) -> PathBuf {
    config.output_dir.join("student_final.json")
}

pub fn metrics_path(config: &RunConfig) -> PathBuf {
    config.output_dir.join("metrics.jsonl")
}

/// Runs training; writes metrics, the final checkpoint and a summary.
pub fn train_run(config: &RunConfig) -> Result<TrainSummary> {
    let dataset = non_empty_dataset(config)?;
    let weights = if config.offline_balancing {
        Some(load_prompt_weights(&config.profile_path(), &dataset)?)
    } else {
        None
    };
    let student = config.load_student()?;
    let ensemble = config.load_ensemble()?;
    let scorer = scorer(config)?;
    let task = config.task();
    std::fs::create_dir_all(&config.output_dir).map_err(|e| HarnessError::io(&config.output_dir, e))?;
    let max_len = config.train.max_response_length;
    let kl_initial = if config.track_kl {
        Some(dataset_reverse_kl(&student, &ensemble, &dataset, max_len)?)
    } else {
        None
    };
    let inputs = TrainInputs {
        dataset: &dataset,
        prompt_weights: weights.as_deref(),
        scorer: scorer.as_ref(),
        verifier: &task,
        train: config.train,
        calibration: config.calibration,
        balance: config.balance,
        online_filtering: config.online_filtering,
    };
    let mut writer = MetricsWriter::create(&metrics_path(config), config.metrics_flush_interval)?;
    let outcome = train(student, &inputs, |m| writer.append(m));
    writer.flush()?;
    let outcome = outcome?;
    write_file(
        &final_checkpoint_path(config),
        &checkpoint::to_checkpoint(&outcome.policy),
    )?;
    let kl_final = if config.track_kl {
        Some(dataset_reverse_kl(&outcome.policy, &ensemble, &dataset, max_len)?)
    } else {
        None
    };
    let summary = TrainSummary {
        steps: outcome.metrics.len(),
        kl_initial,
        kl_final,
        first_correct_ratio: outcome.metrics.first().map(|m| m.correct_ratio),
        last_correct_ratio: outcome.metrics.last().map(|m| m.correct_ratio),
        rollout_seconds: outcome.rollout_time.as_secs_f64(),
        calibration_seconds: outcome.calibration_time.as_secs_f64(),
    };
    write_file(
        &config.output_dir.join("summary.json"),
        &(serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n"),
    )?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptPassAtK {
    pub id: String,
    pub correct: usize,
    pub pass_at_k: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub k: Vec<usize>,
    pub prompts: Vec<PromptPassAtK>,
    /// Macro average over prompts, one entry per `k`.
    pub mean_pass_at_k: Vec<f64>,
}

pub fn evaluate(config: &RunConfig, checkpoint_path: &Path, samples: usize, ks: &[usize]) -> Result<EvalReport> {
    if samples == 0 {
        return Err(HarnessError::Config("samples must be positive".into()));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > samples) {
        return Err(OpdError::PassAtK { k, n: samples }.into());
    }
    let dataset = non_empty_dataset(config)?;
    let policy = load_policy(checkpoint_path)?;
    let task = config.task();
    let mut prompts = Vec::with_capacity(dataset.len());
    let mut mean = vec![0.0; ks.len()];
    for (p, prompt) in dataset.iter().enumerate() {
        let mut correct = 0;
        for i in 0..samples {
            let rollout = sample_trajectory(
                &policy,
                &prompt.tokens,
                config.train.max_response_length,
                derive_seed(config.train.seed, &[4, p as u64, i as u64]),
                &SamplingParams::exact(),
            )?;
            correct += task.verify(prompt, &rollout.tokens)?.is_positive() as usize;
        }
        let values = ks
            .iter()
            .map(|&k| pass_at_k(samples as u64, correct as u64, k as u64))
            .collect::<opd_core::Result<Vec<f64>>>()?;
        for (m, v) in mean.iter_mut().zip(&values) {
            *m += v / dataset.len() as f64;
        }
        prompts.push(PromptPassAtK {
            id: prompt.id.clone(),
            correct,
            pass_at_k: values,
        });
    }
    Ok(EvalReport {
        samples,
        k: ks.to_vec(),
        prompts,
        mean_pass_at_k: mean,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRecord {
    pub prompt_id: String,
    pub rollout_id: usize,
    pub outcome: f64,
    pub tokens: Vec<TokenId>,
    /// Teacher minus student log-prob; negative tokens are student-preferred.
    pub raw_rewards: Vec<f64>,
    /// Raw rewards moved by the trajectory's calibration offset; zero when masked.
    pub calibrated_rewards: Vec<f64>,
}

pub fn heatmap(
    config: &RunConfig,
    checkpoint_path: &Path,
    prompt_id: &str,
    rollouts: usize,
) -> Result<Vec<HeatmapRecord>> {
    let dataset = non_empty_dataset(config)?;
    let (p, prompt) = dataset
        .iter()
        .enumerate()
        .find(|(_, q)| q.id == prompt_id)
        .ok_or_else(|| HarnessError::Config(format!("unknown prompt id `{prompt_id}`")))?;
    let policy = load_policy(checkpoint_path)?;
    let scorer = scorer(config)?;
    let task = config.task();
    let mut trajectories = Vec::with_capacity(rollouts);
    for i in 0..rollouts {
        let rollout = sample_trajectory(
            &policy,
            &prompt.tokens,
            config.train.max_response_length,
            derive_seed(config.train.seed, &[5, p as u64, i as u64]),
            &SamplingParams::exact(),
        )?;
        let teacher = scorer.score(prompt, &rollout.tokens)?;
        let outcome = task.verify(prompt, &rollout.tokens)?;
        trajectories.push(rollout.into_trajectory(teacher, outcome)?);
    }
    let returns = trajectories
        .iter()
        .map(|t| {
            let mean = trajectory_return(t)?.value;
            Ok(match config.train.return_aggregation {
                ReturnAggregation::Mean => mean,
                ReturnAggregation::Sum => mean * t.len() as f64,
            })
        })
        .collect::<opd_core::Result<Vec<f64>>>()?;
    let labels = trajectories.iter().map(|t| t.outcome.is_positive()).collect();
    let cal = calibrate(&ScoredGroup::new(returns.clone(), labels), &config.calibration)?;
    let mut out = Vec::with_capacity(rollouts);
    for (i, t) in trajectories.iter().enumerate() {
        let raw = t.token_rewards()?;
        let offset = cal.calibrated_returns[i] - returns[i];
        let calibrated = if cal.keep_mask[i] {
            raw.iter().map(|r| r + offset).collect()
        } else {
            vec![0.0; raw.len()]
        };
        out.push(HeatmapRecord {
            prompt_id: prompt.id.clone(),
            rollout_id: i,
            outcome: t.outcome.value,
            tokens: t.tokens.clone(),
            raw_rewards: raw,
            calibrated_rewards: calibrated,
        });
    }
    Ok(out)
}

pub fn heatmap_jsonl(records: &[HeatmapRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}
