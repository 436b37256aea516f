use opd_core::calibration::{calibrate, CalibrationConfig, ScoredGroup};
use opd_core::policy::kl::enumerate_trajectories;
use opd_core::policy::{
    broadcast_advantages, exact_reverse_kl, expected_policy_gradient, policy_gradient_step, reverse_kl_gradient,
    sample_trajectory, score_tokens, surrogate_gradient, surrogate_objective, BatchItem, ContextOrder,
    ReturnAggregation, SamplingParams, TabularPolicy, TokenAdvantage,
};
use opd_core::rng::{derive_seed, seeded_rng};
use opd_core::rollout::{trajectory_return, OutcomeReward};
use proptest::prelude::*;
use rand::Rng;

fn random_policy(v: usize, order: ContextOrder, seed: u64, scale: f64) -> TabularPolicy {
    let mut p = TabularPolicy::uniform(v, order, 2, (v - 1) as u32).unwrap();
    let mut rng = seeded_rng(seed);
    for w in p.logits_mut() {
        *w = rng.random_range(-scale..scale);
    }
    p
}

fn relative_error(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn reverse_kl_is_non_negative(seed in any::<u64>(), v in 2usize..5, len in 1usize..4) {
        let s = random_policy(v, ContextOrder::Bigram, seed, 2.0);
        let t = random_policy(v, ContextOrder::Bigram, seed ^ 1, 2.0);
        prop_assert!(exact_reverse_kl(&s, &t, &[1], len).unwrap() >= -1e-12);
    }

    #[test]
    fn q_recursion_matches_enumeration(seed in any::<u64>(), v in 2usize..5, len in 1usize..4, bigram in any::<bool>()) {
        let order = if bigram { ContextOrder::Bigram } else { ContextOrder::Unigram };
        let s = random_policy(v, order, seed, 1.5);
        let t = random_policy(v, order, seed.wrapping_add(7), 1.5);
        let (kl, grad) = reverse_kl_gradient(&s, &t, &[0, 1], len).unwrap();
        prop_assert!((kl - exact_reverse_kl(&s, &t, &[0, 1], len).unwrap()).abs() < 1e-12);
        let mut pg = expected_policy_gradient(&s, &t, &[0, 1], len, ReturnAggregation::Sum).unwrap();
        pg.scale(-1.0);
        prop_assert!(grad.max_abs_diff(&pg) < 1e-8);
    }

    #[test]
    fn kl_gradient_matches_finite_differences(seed in any::<u64>(), len in 1usize..4) {
        let s = random_policy(4, ContextOrder::Bigram, seed, 1.0);
        let t = random_policy(4, ContextOrder::Bigram, !seed, 1.0);
        let (_, grad) = reverse_kl_gradient(&s, &t, &[2], len).unwrap();
        let h = 1e-5;
        for i in 0..s.logits().len() {
            let mut plus = s.clone();
            plus.logits_mut()[i] += h;
            let mut minus = s.clone();
            minus.logits_mut()[i] -= h;
            let fd = (exact_reverse_kl(&plus, &t, &[2], len).unwrap() - exact_reverse_kl(&minus, &t, &[2], len).unwrap()) / (2.0 * h);
            prop_assert!((fd - grad.values[i]).abs() < 1e-7, "logit {i}: fd {fd} analytic {}", grad.values[i]);
        }
    }

    #[test]
    fn surrogate_gradient_matches_finite_differences(seed in any::<u64>()) {
        let p = random_policy(4, ContextOrder::Bigram, seed, 1.0);
        let mut rng = seeded_rng(derive_seed(seed, &[1]));
        let batch: Vec<BatchItem> = (0..6)
            .map(|i| {
                let r = sample_trajectory(&p, &[1, 2], 3, derive_seed(seed, &[2, i]), &SamplingParams::exact()).unwrap();
                let a = rng.random_range(-1.0..1.0);
                BatchItem { prompt_tokens: vec![1, 2], advantages: TokenAdvantage { values: vec![a; r.tokens.len()] }, tokens: r.tokens, keep: i != 5 }
            })
            .collect();
        let grad = surrogate_gradient(&p, &batch);
        let h = 1e-5;
        for i in 0..p.logits().len() {
            let mut plus = p.clone();
            plus.logits_mut()[i] += h;
            let mut minus = p.clone();
            minus.logits_mut()[i] -= h;
            let fd = (surrogate_objective(&plus, &batch) - surrogate_objective(&minus, &batch)) / (2.0 * h);
            if fd.abs() < 1e-9 && grad.values[i].abs() < 1e-9 {
                continue;
            }
            prop_assert!(relative_error(fd, grad.values[i]) <= 1e-5, "logit {i}: fd {fd} analytic {}", grad.values[i]);
        }
    }

    #[test]
    fn advantages_are_constant_along_each_trajectory(returns in prop::collection::vec(-1.0f64..1.0, 2..8), seed in any::<u64>()) {
        let labels: Vec<bool> = (0..returns.len()).map(|i| (seed >> i) & 1 == 1).collect();
        let lengths: Vec<usize> = (0..returns.len()).map(|i| 1 + (seed >> (2 * i)) as usize % 5).collect();
        let g = ScoredGroup::new(returns, labels);
        for cfg in [CalibrationConfig::textual(), CalibrationConfig::identity(), CalibrationConfig { strategy: opd_core::Strategy::Mask, ..CalibrationConfig::textual() }] {
            let cal = calibrate(&g, &cfg).unwrap();
            for (i, adv) in broadcast_advantages(&cal, &lengths).iter().enumerate() {
                prop_assert_eq!(adv.values.len(), lengths[i]);
                let want = if cal.keep_mask[i] { cal.calibrated_returns[i] } else { 0.0 };
                prop_assert!(adv.values.iter().all(|&a| a == want));
            }
        }
    }

    #[test]
    fn rows_remain_distributions_after_updates(seed in any::<u64>(), steps in 1usize..30) {
        let mut p = random_policy(4, ContextOrder::Bigram, seed, 2.0);
        for step in 0..steps {
            let r = sample_trajectory(&p, &[0], 4, derive_seed(seed, &[step as u64]), &SamplingParams::exact()).unwrap();
            let adv = if step % 2 == 0 { 3.0 } else { -2.0 };
            let item = BatchItem { prompt_tokens: vec![0], advantages: TokenAdvantage { values: vec![adv; r.tokens.len()] }, tokens: r.tokens, keep: true };
            p = policy_gradient_step(&p, &[item], 0.7);
        }
        for ctx in 0..p.context_count() {
            prop_assert!((p.probs(ctx).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn self_scoring_matches_sampled_logprobs(seed in any::<u64>()) {
        let p = random_policy(5, ContextOrder::Bigram, seed, 3.0);
        let r = sample_trajectory(&p, &[3, 1], 4, seed, &SamplingParams::exact()).unwrap();
        let scored = score_tokens(&p, &[3, 1], &r.tokens).unwrap();
        for (a, b) in scored.iter().zip(&r.student_logprobs) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn mean_and_sum_agree_for_single_token_responses() {
    let s = random_policy(4, ContextOrder::Bigram, 3, 1.0);
    let t = random_policy(4, ContextOrder::Bigram, 4, 1.0);
    let mean = expected_policy_gradient(&s, &t, &[1], 1, ReturnAggregation::Mean).unwrap();
    let sum = expected_policy_gradient(&s, &t, &[1], 1, ReturnAggregation::Sum).unwrap();
    assert!(mean.max_abs_diff(&sum) < 1e-15);
}

#[test]
fn identity_calibrated_updates_decrease_reverse_kl() {
    let s0 = random_policy(4, ContextOrder::Bigram, 21, 1.0);
    let teacher = random_policy(4, ContextOrder::Bigram, 22, 2.5);
    let prompt = [1u32];
    let max_len = 3;
    let mut student = s0;
    let mut previous = exact_reverse_kl(&student, &teacher, &prompt, max_len).unwrap();
    for step in 0..50u64 {
        let mut batch = Vec::new();
        let mut rollouts = Vec::new();
        for i in 0..4096u64 {
            let r = sample_trajectory(
                &student,
                &prompt,
                max_len,
                derive_seed(7, &[step, i]),
                &SamplingParams::exact(),
            )
            .unwrap();
            let teacher_lps = score_tokens(&teacher, &prompt, &r.tokens).unwrap();
            rollouts.push(r.into_trajectory(teacher_lps, OutcomeReward::binary(false)).unwrap());
        }
        let returns: Vec<f64> = rollouts
            .iter()
            .map(|t| trajectory_return(t).unwrap().value * t.len() as f64)
            .collect();
        let group = ScoredGroup::new(returns, vec![false; rollouts.len()]);
        let cal = calibrate(&group, &CalibrationConfig::identity()).unwrap();
        let lengths: Vec<usize> = rollouts.iter().map(|t| t.len()).collect();
        for (t, adv) in rollouts.into_iter().zip(broadcast_advantages(&cal, &lengths)) {
            batch.push(BatchItem {
                prompt_tokens: prompt.to_vec(),
                tokens: t.tokens,
                advantages: adv,
                keep: true,
            });
        }
        student = policy_gradient_step(&student, &batch, 0.01);
        let kl = exact_reverse_kl(&student, &teacher, &prompt, max_len).unwrap();
        assert!(kl < previous, "step {step}: {kl} >= {previous}");
        previous = kl;
    }
}

#[test]
fn point_mass_policy_emits_its_path() {
    let mut p = TabularPolicy::uniform(9, ContextOrder::Bigram, 1, 8).unwrap();
    let mut prev = None;
    for tok in [3u32, 5, 7, 8] {
        let ctx = p.context(0, prev);
        p.row_mut(ctx).iter_mut().for_each(|w| *w = -1e9);
        p.row_mut(ctx)[tok as usize] = 0.0;
        prev = Some(tok);
    }
    let r = sample_trajectory(&p, &[7, 3, 5], 10, 99, &SamplingParams::exact()).unwrap();
    assert_eq!(r.tokens, vec![3, 5, 7, 8]);
    assert!(r.student_logprobs.iter().all(|&lp| lp == 0.0));
}

#[test]
fn enumeration_counts_every_trajectory() {
    let p = random_policy(3, ContextOrder::Bigram, 1, 1.0);
    let mut count = 0;
    enumerate_trajectories(&p, &[0], 3, 1000, |_, _| count += 1).unwrap();
    // 1 early stop, then 2 * (1 + 2 * 3)
    assert_eq!(count, 1 + 2 + 4 + 8);
}
