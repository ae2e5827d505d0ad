use balistd_core::nn::{ParamSet, Tensor};
use balistd_core::policy::*;
use balistd_core::rng::{self, Stream};
use proptest::prelude::*;
use rand::Rng as _;

fn toy() -> (LinearPolicy, Tensor, Vec<f64>) {
    let pol = LinearPolicy::new(4, 4, 7);
    let x = Tensor::from_vec([1, 1, 2, 2], vec![0.2, 0.9, 0.4, 0.6]).unwrap();
    (pol, x, vec![0.3, 1.0, 0.1, 0.6])
}

fn exact_objective(pol: &LinearPolicy, x: &Tensor, rewards: &[f64]) -> f64 {
    let d = &policy_forward(pol, x, None).unwrap()[0];
    expected_objective(d, rewards).unwrap()
}

/// Enumerated expectation of the estimator: Σ_k p_k (r_k − b) ∇ log p_k.
fn enumerated_estimator(pol: &mut LinearPolicy, x: &Tensor, rewards: &[f64], baseline: f64) -> Vec<f64> {
    let d = policy_forward(pol, x, None).unwrap()[0].clone();
    let mut total = vec![0.0; pol.num_params()];
    for k in 0..4 {
        let rec = RewardRecord { action_index: k, log_prob: d.probs[k].ln(), reward: rewards[k] };
        let g = reinforce_gradient(pol, x, &[rec], baseline, None).unwrap();
        total.iter_mut().zip(&g).for_each(|(t, v)| *t += d.probs[k] * v);
    }
    total
}

#[test]
fn baseline_does_not_change_exact_expectation() {
    let (mut pol, x, r) = toy();
    let g0 = enumerated_estimator(&mut pol, &x, &r, 0.0);
    let g1 = enumerated_estimator(&mut pol, &x, &r, 0.7);
    for (a, b) in g0.iter().zip(&g1) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn constant_reward_estimator_averages_to_zero() {
    let (mut pol, x, _) = toy();
    let dist = policy_forward(&pol, &x, None).unwrap()[0].clone();
    let m = 20_000;
    let mut mean = vec![0.0; pol.num_params()];
    for s in 0..m {
        let (k, lp) = sample_index(&dist, rng::derive(5, Stream::Action, s)).unwrap();
        let g = reinforce_gradient(&mut pol, &x, &[RewardRecord { action_index: k, log_prob: lp, reward: 0.5 }], 0.0, None)
            .unwrap();
        mean.iter_mut().zip(&g).for_each(|(a, v)| *a += v / m as f64);
    }
    assert!(mean.iter().all(|v| v.abs() < 0.01), "{mean:?}");
}

#[test]
fn exact_ascent_is_monotone_on_toy() {
    let (mut pol, x, r) = toy();
    let mut prev = exact_objective(&pol, &x, &r);
    for _ in 0..300 {
        let g = enumerated_estimator(&mut pol, &x, &r, 0.0);
        strategy_step(&mut pol, &g, 1e-2).unwrap();
        let now = exact_objective(&pol, &x, &r);
        assert!(now >= prev * 0.99, "{prev} -> {now}");
        prev = now;
    }
}

#[test]
fn toy_converges_to_rewarded_action() {
    let (mut pol, x, _) = toy();
    let rewards = [0.1, 0.1, 1.0, 0.1];
    let mut baseline = 0.0;
    for step in 0..500u64 {
        let d = policy_forward(&pol, &x, None).unwrap()[0].clone();
        let (k, lp) = sample_index(&d, rng::derive(1, Stream::Action, step)).unwrap();
        let rec = RewardRecord { action_index: k, log_prob: lp, reward: rewards[k] };
        let g = reinforce_gradient(&mut pol, &x, &[rec], baseline, None).unwrap();
        strategy_step(&mut pol, &g, 0.5).unwrap();
        baseline = 0.9 * baseline + 0.1 * rec.reward;
    }
    assert_eq!(policy_forward(&pol, &x, None).unwrap()[0].argmax(), 2);
}

proptest! {
    #[test]
    fn softmax_normalizes(logits in prop::collection::vec(-30.0f64..30.0, 30), mask_bits in any::<u32>()) {
        let d = ActionDistribution::from_logits(&logits, None).unwrap();
        prop_assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert!(d.probs.iter().all(|&p| p >= 0.0));
        let allowed: Vec<bool> = (0..30).map(|i| mask_bits >> i & 1 == 1 || i == 0).collect();
        let m = ActionDistribution::from_logits(&logits, Some(&allowed)).unwrap();
        prop_assert!((m.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        for (p, a) in m.probs.iter().zip(&allowed) {
            prop_assert!(*a || *p == 0.0);
        }
    }

    #[test]
    fn expected_objective_is_dot_product(seed in any::<u64>()) {
        let mut r = rng::rng(seed);
        let logits: Vec<f64> = (0..30).map(|_| r.gen_range(-2.0..2.0)).collect();
        let rewards: Vec<f64> = (0..30).map(|_| r.gen_range(0.0..1.0)).collect();
        let d = ActionDistribution::from_logits(&logits, None).unwrap();
        let mut brute = 0.0;
        for k in 0..30 {
            brute += d.probs[k] * rewards[k];
        }
        prop_assert!((expected_objective(&d, &rewards).unwrap() - brute).abs() < 1e-12);
    }

    #[test]
    fn sampled_log_prob_matches(seed in any::<u64>()) {
        let mut r = rng::rng(seed);
        let logits: Vec<f64> = (0..30).map(|_| r.gen_range(-2.0..2.0)).collect();
        let d = ActionDistribution::from_logits(&logits, None).unwrap();
        let (a, lp) = sample_action(&d, seed).unwrap();
        prop_assert_eq!(lp, d.probs[a.index()].ln());
        prop_assert!(lp <= 0.0);
    }
}
