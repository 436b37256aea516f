//! Offline difficulty-aware reweighting and online correctness-aware filtering.
//!
//! Offline, every prompt is rolled out `N` times and the number of verified
//! responses becomes its difficulty bucket. Depending on the shape of the
//! resulting histogram, intermediate (or all non-zero) buckets are upweighted
//! until their mass matches the largest bucket.
//!
//! Online, a freshly rolled-out batch whose correct ratio strays from the
//! target by more than the tolerance loses the fewest trajectories of the
//! over-represented class needed to return to the tolerance band. Removals
//! are apportioned across groups by largest remainder and drawn uniformly
//! inside each group.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{OpdError, Result};
use crate::policy::sampling::{sample_trajectory, SamplingParams};
use crate::policy::tabular::TabularPolicy;
use crate::policy::task::Verifier;
use crate::rng::{derive_seed, seeded_rng};
use crate::rollout::{Prompt, RolloutGroup};

/// Histogram shape of per-prompt pass counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    U,
    MirroredJ,
    Flat,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BalanceConfig {
    pub offline_rollouts: usize,
    pub shape_override: Option<Shape>,
    pub duplication_cap: f64,
    pub target_ratio: f64,
    pub tolerance: f64,
    pub sampling: SamplingParams,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        Self {
            offline_rollouts: 8,
            shape_override: None,
            duplication_cap: 8.0,
            target_ratio: 0.5,
            tolerance: 0.1,
            sampling: SamplingParams::offline_profiling(),
        }
    }
}

impl BalanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.offline_rollouts < 2 {
            return Err(OpdError::InvalidConfig(format!(
                "offline rollouts must be >= 2, got {}",
                self.offline_rollouts
            )));
        }
        if !(self.duplication_cap >= 1.0) {
            return Err(OpdError::InvalidConfig(format!(
                "duplication cap must be >= 1, got {}",
                self.duplication_cap
            )));
        }
        if !(self.target_ratio > 0.0 && self.target_ratio < 1.0) {
            return Err(OpdError::InvalidConfig(format!(
                "target ratio must lie in (0, 1), got {}",
                self.target_ratio
            )));
        }
        let bound = self.target_ratio.min(1.0 - self.target_ratio);
        if !(self.tolerance > 0.0 && self.tolerance < bound) {
            return Err(OpdError::InvalidConfig(format!(
                "tolerance must lie in (0, {bound}), got {}",
                self.tolerance
            )));
        }
        self.sampling.validate()
    }
}

/// Per-prompt pass counts and sampling weights.
#[derive(Debug, Clone, PartialEq)]
pub struct DifficultyProfile {
    pub ids: Vec<String>,
    pub pass_counts: Vec<usize>,
    pub rollouts_per_prompt: usize,
    /// `histogram[k]` = number of prompts with `k` correct rollouts.
    pub histogram: Vec<usize>,
    /// Normalized to sum to the number of prompts.
    pub weights: Vec<f64>,
    /// Per-prompt multiplier before normalization.
    pub multipliers: Vec<f64>,
}

/// One line of a serialized profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRecord {
    pub id: String,
    pub pass_count: usize,
    pub weight: f64,
}

impl DifficultyProfile {
    /// Unit weights from known pass counts.
    pub fn from_counts(ids: Vec<String>, pass_counts: Vec<usize>, rollouts_per_prompt: usize) -> Result<Self> {
        if ids.len() != pass_counts.len() {
            return Err(OpdError::InvalidConfig("ids and pass counts differ in length".into()));
        }
        let mut histogram = vec![0; rollouts_per_prompt + 1];
        for &k in &pass_counts {
            if k > rollouts_per_prompt {
                return Err(OpdError::InvalidConfig(format!(
                    "pass count {k} exceeds {rollouts_per_prompt} rollouts"
                )));
            }
            histogram[k] += 1;
        }
        let n = ids.len();
        Ok(Self {
            ids,
            pass_counts,
            rollouts_per_prompt,
            histogram,
            weights: vec![1.0; n],
            multipliers: vec![1.0; n],
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn records(&self) -> Vec<ProfileRecord> {
        self.ids
            .iter()
            .zip(&self.pass_counts)
            .zip(&self.weights)
            .map(|((id, &pass_count), &weight)| ProfileRecord {
                id: id.clone(),
                pass_count,
                weight,
            })
            .collect()
    }

    /// One `{"id","pass_count","weight"}` JSON object per line.
    pub fn to_jsonl(&self) -> String {
        self.records()
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    /// Total sampling weight of each pass-count bucket.
    pub fn bucket_mass(&self) -> Vec<f64> {
        let mut mass = vec![0.0; self.rollouts_per_prompt + 1];
        for (&k, &w) in self.pass_counts.iter().zip(&self.weights) {
            mass[k] += w;
        }
        mass
    }
}

pub fn parse_profile(text: &str) -> Result<Vec<ProfileRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| OpdError::Format(format!("profile line {}: {e}", i + 1)))
        })
        .collect()
}

/// Rolls out every prompt `offline_rollouts` times and counts verified responses.
pub fn profile_difficulty(
    dataset: &[Prompt],
    policy: &TabularPolicy,
    verifier: &dyn Verifier,
    config: &BalanceConfig,
    max_len: usize,
    seed: u64,
) -> Result<DifficultyProfile> {
    config.validate()?;
    let n = config.offline_rollouts;
    let mut pass_counts = Vec::with_capacity(dataset.len());
    for (i, prompt) in dataset.iter().enumerate() {
        let mut correct = 0;
        for j in 0..n {
            let rollout = sample_trajectory(
                policy,
                &prompt.tokens,
                max_len,
                derive_seed(seed, &[i as u64, j as u64]),
                &config.sampling,
            )?;
            let outcome = verifier
                .verify(prompt, &rollout.tokens)
                .map_err(|e| OpdError::Profiling {
                    prompt_id: prompt.id.clone(),
                    reason: e.to_string(),
                })?;
            if outcome.is_positive() {
                correct += 1;
            }
        }
        pass_counts.push(correct);
    }
    DifficultyProfile::from_counts(dataset.iter().map(|p| p.id.clone()).collect(), pass_counts, n)
}

/// Classifies a pass-count histogram by comparing its extremes to the interior mean.
pub fn classify_shape(histogram: &[usize]) -> Shape {
    if histogram.len() < 3 {
        return Shape::Flat;
    }
    let last = histogram.len() - 1;
    let interior = &histogram[1..last];
    let interior_mean = interior.iter().sum::<usize>() as f64 / interior.len() as f64;
    let hard = histogram[0] as f64 > interior_mean;
    let easy = histogram[last] as f64 > interior_mean;
    match (hard, easy) {
        (true, true) => Shape::U,
        (false, true) => Shape::MirroredJ,
        _ => Shape::Flat,
    }
}

/// Upweights the buckets `shape` targets so each carries the largest bucket's
/// mass, with per-prompt multipliers capped at `cap`.
pub fn reweight_offline(profile: &DifficultyProfile, shape: Shape, cap: f64) -> DifficultyProfile {
    let n = profile.rollouts_per_prompt;
    let upweighted = match shape {
        Shape::U => 1..n,
        Shape::MirroredJ => 1..n + 1,
        Shape::Flat => 0..0,
    };
    let max_mass = profile.histogram.iter().copied().max().unwrap_or(0) as f64;
    let bucket_multiplier: Vec<f64> = (0..=n)
        .map(|k| {
            let count = profile.histogram[k];
            if upweighted.contains(&k) && count > 0 {
                (max_mass / count as f64).min(cap).max(1.0)
            } else {
                1.0
            }
        })
        .collect();
    let multipliers: Vec<f64> = profile.pass_counts.iter().map(|&k| bucket_multiplier[k]).collect();
    let total: f64 = multipliers.iter().sum();
    let scale = if total > 0.0 { profile.len() as f64 / total } else { 1.0 };
    DifficultyProfile {
        weights: multipliers.iter().map(|m| m * scale).collect(),
        multipliers,
        ..profile.clone()
    }
}

/// Draws `count` prompt indices with replacement, proportionally to `weights`.
pub fn weighted_prompt_sample(weights: &[f64], count: usize, seed: u64) -> Result<Vec<usize>> {
    let dist = WeightedIndex::new(weights).map_err(|e| OpdError::InvalidConfig(format!("prompt weights: {e}")))?;
    let mut rng = seeded_rng(seed);
    Ok((0..count).map(|_| dist.sample(&mut rng)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterWarning {
    /// Only one outcome class is present; nothing can be rebalanced.
    SingleOutcomeClass,
    /// No removal count lands inside the tolerance band; the closest was used.
    Unreachable,
}

/// Which trajectories an online filter keeps.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterPlan {
    /// `keep[g][i]` for trajectory `i` of group `g`.
    pub keep: Vec<Vec<bool>>,
    /// Over-represented class (`true` = correct), if anything was removed.
    pub removed_class: Option<bool>,
    pub removed: usize,
    pub ratio_before: f64,
    pub ratio_after: f64,
    pub warning: Option<FilterWarning>,
}

fn in_band(ratio: f64, config: &BalanceConfig) -> bool {
    const SLACK: f64 = 1e-12;
    ratio >= config.target_ratio - config.tolerance - SLACK && ratio <= config.target_ratio + config.tolerance + SLACK
}

/// Smallest number of `surplus`-class removals that brings the ratio into the band.
///
/// Returns `(count, reachable)`; when unreachable, the count minimizing the
/// distance to the target is returned.
pub fn minimal_removal(
    correct: usize,
    incorrect: usize,
    remove_correct: bool,
    config: &BalanceConfig,
) -> (usize, bool) {
    let available = if remove_correct { correct } else { incorrect };
    let ratio_after = |r: usize| {
        let (c, t) = if remove_correct {
            (correct - r, correct + incorrect - r)
        } else {
            (correct, correct + incorrect - r)
        };
        c as f64 / t as f64
    };
    for r in 0..available {
        if in_band(ratio_after(r), config) {
            return (r, true);
        }
    }
    let best = (0..available)
        .min_by(|&a, &b| {
            let da = (ratio_after(a) - config.target_ratio).abs();
            let db = (ratio_after(b) - config.target_ratio).abs();
            da.total_cmp(&db).then(a.cmp(&b))
        })
        .unwrap_or(0);
    (best, false)
}

/// Splits `total` removals across groups holding `counts` candidates each,
/// proportionally with largest-remainder rounding (ties to the lower index).
pub fn apportion(total: usize, counts: &[usize]) -> Vec<usize> {
    let sum: usize = counts.iter().sum();
    if sum == 0 || total == 0 {
        return vec![0; counts.len()];
    }
    let mut shares: Vec<usize> = counts.iter().map(|&k| total * k / sum).collect();
    let assigned: usize = shares.iter().sum();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = total * counts[a] % sum;
        let rb = total * counts[b] % sum;
        rb.cmp(&ra).then(a.cmp(&b))
    });
    for &g in order.iter().take(total - assigned) {
        shares[g] += 1;
    }
    shares
}

/// Plans the online correctness-aware filter over per-group outcome labels.
pub fn plan_online_filter(labels: &[Vec<bool>], config: &BalanceConfig, seed: u64) -> Result<FilterPlan> {
    config.validate()?;
    let correct: usize = labels.iter().map(|g| g.iter().filter(|&&l| l).count()).sum();
    let total: usize = labels.iter().map(Vec::len).sum();
    let incorrect = total - correct;
    let ratio_before = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
    let mut plan = FilterPlan {
        keep: labels.iter().map(|g| vec![true; g.len()]).collect(),
        removed_class: None,
        removed: 0,
        ratio_before,
        ratio_after: ratio_before,
        warning: None,
    };
    if total == 0 || in_band(ratio_before, config) {
        return Ok(plan);
    }
    if correct == 0 || incorrect == 0 {
        plan.warning = Some(FilterWarning::SingleOutcomeClass);
        return Ok(plan);
    }
    let remove_correct = ratio_before > config.target_ratio;
    let (removals, reachable) = minimal_removal(correct, incorrect, remove_correct, config);
    if !reachable {
        plan.warning = Some(FilterWarning::Unreachable);
    }
    let candidates: Vec<Vec<usize>> = labels
        .iter()
        .map(|g| (0..g.len()).filter(|&i| g[i] == remove_correct).collect())
        .collect();
    let shares = apportion(removals, &candidates.iter().map(Vec::len).collect::<Vec<_>>());
    let mut rng = seeded_rng(seed);
    for (g, (cands, &share)) in candidates.iter().zip(&shares).enumerate() {
        if share == 0 {
            continue;
        }
        for pick in index::sample(&mut rng, cands.len(), share) {
            plan.keep[g][cands[pick]] = false;
        }
    }
    plan.removed_class = Some(remove_correct);
    plan.removed = removals;
    let kept_correct = if remove_correct { correct - removals } else { correct };
    plan.ratio_after = kept_correct as f64 / (total - removals) as f64;
    Ok(plan)
}

/// A batch after online filtering.
#[derive(Debug, Clone)]
pub struct FilteredBatch {
    pub groups: Vec<RolloutGroup>,
    /// For every kept trajectory, its index in the original group.
    pub kept_indices: Vec<Vec<usize>>,
    pub plan: FilterPlan,
}

pub fn filter_online(batch: &[RolloutGroup], config: &BalanceConfig, seed: u64) -> Result<FilteredBatch> {
    let labels: Vec<Vec<bool>> = batch.iter().map(RolloutGroup::labels).collect();
    let plan = plan_online_filter(&labels, config, seed)?;
    let mut groups = Vec::with_capacity(batch.len());
    let mut kept_indices = Vec::with_capacity(batch.len());
    for (group, keep) in batch.iter().zip(&plan.keep) {
        let idx: Vec<usize> = (0..group.len()).filter(|&i| keep[i]).collect();
        let trajectories = idx.iter().map(|&i| group.trajectories[i].clone()).collect();
        groups.push(RolloutGroup::new(group.prompt.clone(), trajectories));
        kept_indices.push(idx);
    }
    Ok(FilteredBatch {
        groups,
        kept_indices,
        plan,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> BalanceConfig {
        BalanceConfig::default()
    }

    #[test]
    fn shape_examples() {
        assert_eq!(classify_shape(&[40, 2, 2, 2, 2, 2, 2, 2, 40]), Shape::U);
        assert_eq!(classify_shape(&[2, 3, 4, 5, 8, 10, 14, 20, 40]), Shape::MirroredJ);
        assert_eq!(classify_shape(&[5; 9]), Shape::Flat);
        assert_eq!(classify_shape(&[40, 10, 5, 2, 1, 1, 1, 1, 1]), Shape::Flat);
    }

    fn profile(counts: &[usize]) -> DifficultyProfile {
        DifficultyProfile::from_counts((0..counts.len()).map(|i| format!("p{i}")).collect(), counts.to_vec(), 8)
            .unwrap()
    }

    #[test]
    fn flat_and_cap_one_are_identity() {
        let p = profile(&[0, 0, 4, 8, 8]);
        assert_eq!(reweight_offline(&p, Shape::Flat, 8.0).weights, vec![1.0; 5]);
        assert_eq!(reweight_offline(&p, Shape::U, 1.0).weights, vec![1.0; 5]);
        assert_eq!(reweight_offline(&p, Shape::MirroredJ, 1.0).weights, vec![1.0; 5]);
    }

    #[test]
    fn mass_matching_example() {
        let p = profile(&[0, 0, 0, 0, 4, 8, 8, 8, 8]);
        let w = reweight_offline(&p, Shape::U, 8.0);
        assert_eq!(w.multipliers[4], 4.0);
        let sum: f64 = w.weights.iter().sum();
        assert!((sum - 9.0).abs() < 1e-12);
        assert!((w.weights[4] - 3.0).abs() < 1e-12);
        assert!((w.weights[0] - 0.75).abs() < 1e-12);
        let mass = w.bucket_mass();
        assert!((mass[0] - mass[4]).abs() < 1e-12 && (mass[8] - mass[4]).abs() < 1e-12);
    }

    #[test]
    fn binding_cap_applies_exact_multiplier() {
        let p = profile(&[0, 0, 0, 0, 0, 0, 3, 8, 8, 8, 8, 8, 8]);
        let w = reweight_offline(&p, Shape::U, 2.0);
        assert_eq!(w.multipliers[6], 2.0);
        assert!((w.weights[6] / w.weights[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn profile_jsonl_round_trip() {
        let p = reweight_offline(&profile(&[0, 0, 4, 8, 8]), Shape::U, 8.0);
        let text = p.to_jsonl();
        assert!(text.starts_with("{\"id\":\"p0\",\"pass_count\":0,\"weight\":"));
        assert_eq!(parse_profile(&text).unwrap(), p.records());
        assert!(parse_profile("{\"id\":1}").is_err());
    }

    fn labels(groups: &[(usize, usize)]) -> Vec<Vec<bool>> {
        groups
            .iter()
            .map(|&(c, w)| {
                std::iter::repeat_n(true, c)
                    .chain(std::iter::repeat_n(false, w))
                    .collect()
            })
            .collect()
    }

    #[test]
    fn balanced_batch_is_untouched() {
        let plan = plan_online_filter(&labels(&[(4, 4), (4, 4)]), &cfg(), 1).unwrap();
        assert_eq!(plan.removed, 0);
        assert!(plan.keep.iter().flatten().all(|&k| k));
        assert_eq!(plan.warning, None);
    }

    #[test]
    fn surplus_correct_is_trimmed_to_band_edge() {
        let plan = plan_online_filter(&labels(&[(6, 2), (6, 2)]), &cfg(), 3).unwrap();
        assert_eq!(plan.removed, 6);
        assert_eq!(plan.removed_class, Some(true));
        assert!((plan.ratio_after - 0.6).abs() < 1e-12);
        let removed: Vec<usize> = plan.keep.iter().map(|g| g.iter().filter(|&&k| !k).count()).collect();
        assert_eq!(removed, vec![3, 3]);
        for (g, keep) in plan.keep.iter().enumerate() {
            for i in 6..8 {
                assert!(keep[i], "incorrect trajectory {i} of group {g} removed");
            }
        }
    }

    #[test]
    fn single_class_batch_warns() {
        let plan = plan_online_filter(&labels(&[(8, 0), (8, 0)]), &cfg(), 1).unwrap();
        assert_eq!(plan.removed, 0);
        assert_eq!(plan.warning, Some(FilterWarning::SingleOutcomeClass));
    }

    #[test]
    fn apportion_uses_largest_remainder() {
        assert_eq!(apportion(6, &[6, 6]), vec![3, 3]);
        assert_eq!(apportion(5, &[3, 3, 3]), vec![2, 2, 1]);
        assert_eq!(apportion(3, &[1, 5]), vec![1, 2]);
        assert_eq!(apportion(4, &[1, 5]), vec![1, 3]);
        assert_eq!(apportion(0, &[1, 5]), vec![0, 0]);
        assert_eq!(apportion(2, &[0, 0]), vec![0, 0]);
    }

    #[test]
    fn config_validation() {
        let mut c = cfg();
        c.tolerance = 0.6;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.offline_rollouts = 1;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.duplication_cap = 0.5;
        assert!(c.validate().is_err());
        assert!(cfg().validate().is_ok());
    }

    #[test]
    fn weighted_sampling_respects_zero_weight() {
        let idx = weighted_prompt_sample(&[1.0, 0.0, 2.0], 200, 4).unwrap();
        assert!(idx.iter().all(|&i| i != 1));
        assert_eq!(idx, weighted_prompt_sample(&[1.0, 0.0, 2.0], 200, 4).unwrap());
    }
}
