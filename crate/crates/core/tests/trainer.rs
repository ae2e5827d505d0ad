use balistd_core::corruption::{CorruptionAction, CorruptionTable, NUM_ACTIONS};
use balistd_core::dataset::{synth_generate, ImageSample, SynthConfig};
use balistd_core::detector::{detector_forward, DetectorConfig};
use balistd_core::imaging::GrayImage;
use balistd_core::metrics::soft_iou_loss;
use balistd_core::nn::{fingerprint, ParamSet};
use balistd_core::policy::{reinforce_gradient, strategy_step, StrategyNetConfig};
use balistd_core::trainer::*;

fn small_cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        crop: 32,
        steps: 2,
        detector: DetectorConfig { channels: [2, 4, 8], sfim: true },
        strategy: StrategyNetConfig { base_channels: 2 },
        ..Default::default()
    }
}

fn data(n: usize) -> Vec<ImageSample> {
    synth_generate(&SynthConfig { count: n, size: 32, ..Default::default() }).unwrap()
}

#[test]
fn duplicated_corrupted_term_doubles_gradient() {
    let cfg = small_cfg();
    let d = data(4);
    let batch = make_batch(&d, &cfg, 0).unwrap();
    let mut det = TrainState::new(&cfg).detector;
    detector_gradient(&mut det, &batch.ids, &batch.images, None, &batch.masks, 1.0).unwrap();
    let clean = det.flat_grads();
    let l = detector_gradient(&mut det, &batch.ids, &batch.images, Some(&batch.images), &batch.masks, 1.0).unwrap();
    assert_eq!(l.clean_loss, l.cor_loss);
    for (a, b) in det.flat_grads().iter().zip(&clean) {
        assert!((a - 2.0 * b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs 2×{b}");
    }
}

#[test]
fn lambda_zero_matches_clean_only_training() {
    let d = data(4);
    let table = CorruptionTable::default();
    let base = TrainConfig { mode: Mode::Joint, lambda: 0.0, ..small_cfg() };
    let a = train(&base, &table, &d, &[]).unwrap();
    let mut b = TrainState::new(&base);
    for step in 0..base.steps {
        let batch = make_batch(&d, &base, step).unwrap();
        detector_step(&mut b, &batch, None, &base).unwrap();
        b.step += 1;
    }
    assert_eq!(a.state.detector, b.detector);
}

#[test]
fn single_sample_overfit() {
    let d = vec![data(1).remove(0)];
    let cfg = TrainConfig {
        mode: Mode::Joint,
        lambda: 0.0,
        batch_size: 1,
        steps: 300,
        lr_d: 1e-3,
        detector: DetectorConfig { channels: [4, 8, 16], sfim: true },
        ..small_cfg()
    };
    let out = train(&cfg, &CorruptionTable::default(), &d, &[]).unwrap();
    let p = detector_forward(&out.state.detector, &d[0].image).unwrap();
    let loss = soft_iou_loss(&p, &d[0].mask).unwrap();
    assert!(loss < 0.1, "loss {loss}");
}

#[test]
fn joint_mode_draws_uniform_actions() {
    let cfg = TrainConfig { mode: Mode::Joint, batch_size: 1, ..small_cfg() };
    let state = TrainState::new(&cfg);
    let img = [GrayImage::filled(32, 32, 0.5)];
    let table = CorruptionTable::default();
    let n = 30_000u64;
    let mut counts = [0usize; NUM_ACTIONS];
    let mut s = state.clone();
    for step in 0..n {
        s.step = step;
        let c = generate_corrupted_batch(&s, &img, &cfg, &table).unwrap();
        counts[c.actions[0].index()] += 1;
    }
    for c in counts {
        assert!((c as f64 / n as f64 - 1.0 / 30.0).abs() < 0.01, "{counts:?}");
    }
}

#[test]
fn one_hot_policy_picks_its_action_everywhere() {
    let cfg = small_cfg();
    let mut state = TrainState::new(&cfg);
    let target = 17;
    let bias = state.strategy.params_mut().pop().unwrap();
    bias.value.iter_mut().enumerate().for_each(|(k, v)| *v = if k == target { 200.0 } else { 0.0 });
    let d = data(4);
    let table = CorruptionTable::default();
    for step in 0..5 {
        state.step = step;
        let batch = make_batch(&d, &cfg, step).unwrap();
        let c = generate_corrupted_batch(&state, &batch.images, &cfg, &table).unwrap();
        assert!(c.actions.iter().all(|&a| a == CorruptionAction::from_index(target).unwrap()));
        assert!(c.records.iter().all(|r| r.log_prob == 0.0));
    }
}

#[test]
fn group_restriction_only_samples_group() {
    use balistd_core::corruption::CorruptionGroup;
    let cfg = TrainConfig { action_group: Some(CorruptionGroup::Blur), steps: 5, ..small_cfg() };
    let out = train(&cfg, &CorruptionTable::default(), &data(4), &[]).unwrap();
    for row in &out.log {
        for (k, &n) in row.action_histogram.iter().enumerate() {
            let a = CorruptionAction::from_index(k).unwrap();
            assert!(n == 0 || a.kind.group() == CorruptionGroup::Blur);
        }
    }
}

#[test]
fn sub_steps_touch_only_their_own_player() {
    let cfg = small_cfg();
    let d = data(4);
    let table = CorruptionTable::default();
    let mut state = TrainState::new(&cfg);
    for step in 0..3 {
        let batch = make_batch(&d, &cfg, step).unwrap();
        let mut c = generate_corrupted_batch(&state, &batch.images, &cfg, &table).unwrap();

        let strategy_before = fingerprint(&state.strategy);
        let losses = detector_step(&mut state, &batch, Some(&c.images), &cfg).unwrap();
        assert_eq!(fingerprint(&state.strategy), strategy_before);

        let detector_before = fingerprint(&state.detector);
        for (r, &v) in c.records.iter_mut().zip(&losses.rewards) {
            r.reward = v;
        }
        let refs: Vec<&GrayImage> = batch.images.iter().collect();
        let x = balistd_core::detector::images_to_tensor(&refs).unwrap();
        let g = reinforce_gradient(&mut state.strategy, &x, &c.records, 0.0, None).unwrap();
        strategy_step(&mut state.strategy, &g, cfg.lr_s).unwrap();
        assert_eq!(fingerprint(&state.detector), detector_before);
        assert_ne!(fingerprint(&state.strategy), strategy_before);
        state.step += 1;
    }
}

#[test]
fn training_is_deterministic() {
    let d = data(4);
    let table = CorruptionTable::default();
    let a = train(&small_cfg(), &table, &d, &[]).unwrap();
    let b = train(&small_cfg(), &table, &d, &[]).unwrap();
    assert_eq!(a.state, b.state);
    assert_eq!(a.log, b.log);
    let c = train(&TrainConfig { seed: 1, ..small_cfg() }, &table, &d, &[]).unwrap();
    assert_ne!(a.state.detector, c.state.detector);
}

#[test]
fn joint_and_adversarial_diverge() {
    let d = data(4);
    let table = CorruptionTable::default();
    let cfg = TrainConfig { steps: 10, lr_s: 1.0, ..small_cfg() };
    let a = train(&cfg, &table, &d, &[]).unwrap();
    let j = train(&TrainConfig { mode: Mode::Joint, ..cfg }, &table, &d, &[]).unwrap();
    assert_ne!(a.log, j.log);
    assert_ne!(a.state.detector, j.state.detector);
}
