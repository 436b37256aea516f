use opd_core::rollout::{
    order_consistency, partition_group, rl_return, token_reward, trajectory_return, OutcomeReward, Prompt,
    RolloutGroup, Trajectory,
};
use proptest::prelude::*;

fn logprob() -> impl Strategy<Value = f64> {
    -40.0f64..0.0
}

fn trajectory() -> impl Strategy<Value = Trajectory> {
    (1usize..12)
        .prop_flat_map(|len| {
            (
                prop::collection::vec(0u32..9, len),
                prop::collection::vec(logprob(), len),
                prop::collection::vec(logprob(), len),
                any::<bool>(),
            )
        })
        .prop_map(|(tokens, s, t, ok)| Trajectory::new(tokens, s, t, OutcomeReward::binary(ok)).unwrap())
}

proptest! {
    #[test]
    fn token_reward_is_antisymmetric(a in -50.0f64..0.0, b in -50.0f64..0.0) {
        prop_assert_eq!(token_reward(a, b).unwrap(), -token_reward(b, a).unwrap());
    }

    #[test]
    fn identical_scores_give_zero_return(tokens in prop::collection::vec(0u32..9, 1..10), seed in any::<u64>()) {
        let lps: Vec<f64> = tokens.iter().enumerate().map(|(i, _)| -(((seed >> (i % 60)) % 97) as f64) / 7.0).collect();
        let t = Trajectory::new(tokens, lps.clone(), lps, OutcomeReward::binary(true)).unwrap();
        prop_assert_eq!(trajectory_return(&t).unwrap().value, 0.0);
    }

    #[test]
    fn return_times_length_is_reward_sum(t in trajectory()) {
        let ret = trajectory_return(&t).unwrap().value;
        let sum: f64 = t.token_rewards().unwrap().iter().sum();
        prop_assert!((ret * t.len() as f64 - sum).abs() < 1e-12 * sum.abs().max(1.0));
        let tokens = t.tokens.clone();
        let again = Trajectory::new(tokens, t.student_logprobs.clone(), t.teacher_logprobs.clone(), t.outcome).unwrap();
        prop_assert!((trajectory_return(&again).unwrap().value - ret).abs() <= 1e-12);
    }

    #[test]
    fn clamped_logprobs_stay_in_range(t in trajectory()) {
        for &lp in t.student_logprobs.iter().chain(&t.teacher_logprobs) {
            prop_assert!(lp.is_finite() && (-30.0..=0.0).contains(&lp));
        }
    }

    #[test]
    fn soft_threshold_orders_returns(threshold in 0.01f64..1.0, hi in 0.0f64..1.0, lo in 0.0f64..1.0) {
        let pos = threshold + hi * (1.0 - threshold);
        let neg = lo * threshold * 0.999;
        prop_assume!(pos >= threshold && neg < threshold);
        let p = OutcomeReward::soft(pos, threshold).unwrap();
        let n = OutcomeReward::soft(neg, threshold).unwrap();
        prop_assert!(p.is_positive() && !n.is_positive());
        prop_assert!(rl_return(&p) >= rl_return(&n));
    }

    #[test]
    fn partition_covers_every_trajectory(ts in prop::collection::vec(trajectory(), 1..10)) {
        let g = ts.len();
        let group = RolloutGroup::new(Prompt::new("p", "d", vec![1]), ts);
        let (pos, neg) = partition_group(&group);
        prop_assert_eq!(pos.len() + neg.len(), g);
        let mut all: Vec<usize> = pos.iter().chain(&neg).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..g).collect::<Vec<_>>());
        for &i in &pos {
            prop_assert!(group.trajectories[i].outcome.is_positive());
        }
        for &i in &neg {
            prop_assert!(!group.trajectories[i].outcome.is_positive());
        }
    }

    #[test]
    fn worst_violation_matches_pairwise_scan(returns in prop::collection::vec(-2.0f64..2.0, 1..10), seed in any::<u64>()) {
        let labels: Vec<bool> = (0..returns.len()).map(|i| (seed >> i) & 1 == 1).collect();
        let report = order_consistency(&returns, &labels);
        let mut worst = 0.0f64;
        for i in 0..returns.len() {
            for j in 0..returns.len() {
                if labels[i] && !labels[j] {
                    worst = worst.max(returns[j] - returns[i]);
                }
            }
        }
        prop_assert!((report.worst_violation - worst).abs() < 1e-15);
        prop_assert_eq!(report.is_consistent, worst <= 0.0);
    }
}

#[test]
fn binary_rl_returns_are_order_consistent() {
    for a in [false, true] {
        for b in [false, true] {
            let (x, y) = (OutcomeReward::binary(a), OutcomeReward::binary(b));
            if x.is_positive() && !y.is_positive() {
                assert!(rl_return(&x) >= rl_return(&y));
            }
        }
    }
}
