use opd_core::policy::{sample_trajectory, score_tokens, SamplingParams, SortedDigits};

#[test]
fn seeded_reference_trajectory() {
    let task = SortedDigits::new(8);
    let prompts = task.generate(4, 2, 4, 256, 2024, |_| "arith".into()).unwrap();
    assert_eq!(prompts[0].tokens, vec![4, 7, 0, 6]);
    let student = task.noisy_expert(&prompts, 256, 1.5, 1.0, 7).unwrap();
    let r = sample_trajectory(&student, &prompts[0].tokens, 6, 31337, &SamplingParams::exact()).unwrap();
    assert_eq!(r.tokens, vec![0, 0, 7, 4, 6, 1]);
    let want = [
        -1.0181642794666859,
        -2.642720512441411,
        -2.6475554164973993,
        -2.8876117474635756,
        -1.5807993228531,
        -2.4439485645044345,
    ];
    assert_eq!(r.student_logprobs, want);
    assert_eq!(score_tokens(&student, &prompts[0].tokens, &r.tokens).unwrap(), want);
}
