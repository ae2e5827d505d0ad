//! The alternating bi-level loop: per step, corrupt a batch, take one
//! detector descent step on the clean + corrupted loss, then (adversarial
//! mode) one strategy ascent step on the corrupted losses as rewards.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corruption::{apply_with, CorruptionAction, CorruptionGroup, CorruptionTable, NUM_ACTIONS};
use crate::dataset::ImageSample;
use crate::detector::{images_to_tensor, Detector, DetectorConfig};
use crate::error::{Error, Result};
use crate::imaging::{BinaryMask, GrayImage};
use crate::metrics::{soft_iou_loss_grad, MetricAccumulator, TargetMatchConfig};
use crate::nn::{Adam, ParamSet, Tensor};
use crate::par;
use crate::policy::{
    policy_forward, reinforce_gradient, sample_index, strategy_step, ActionDistribution, RewardRecord, StrategyNet,
    StrategyNetConfig,
};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Uniformly random corruptions with the cooperative loss.
    Joint,
    /// Corruptions sampled from the learned strategy.
    Adversarial,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Joint => "joint",
            Mode::Adversarial => "adversarial",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Mode::Joint),
            "adversarial" => Ok(Mode::Adversarial),
            other => Err(Error::Config(format!("unknown mode `{other}` (expected joint or adversarial)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_d: f64,
    pub lr_s: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub crop: usize,
    pub mode: Mode,
    pub seed: u64,
    pub baseline_decay: f64,
    /// Restricts corruptions to one group; `None` allows all 30 actions.
    pub action_group: Option<CorruptionGroup>,
    /// Clean validation IOU is logged every this many steps (0 disables).
    pub val_every: u64,
    pub detector: DetectorConfig,
    pub strategy: StrategyNetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_d: 5e-4,
            lr_s: 1e-4,
            lambda: 1.0,
            batch_size: 8,
            steps: 2000,
            crop: 64,
            mode: Mode::Adversarial,
            seed: 0,
            baseline_decay: 0.9,
            action_group: None,
            val_every: 0,
            detector: DetectorConfig::default(),
            strategy: StrategyNetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr_d > 0.0 && self.lr_d.is_finite()) || !(self.lr_s > 0.0 && self.lr_s.is_finite()) {
            return bad("lr_d and lr_s must be positive");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.crop < 16 || self.crop % 8 != 0 {
            return bad("crop must be >= 16 and divisible by 8");
        }
        if self.uses_strategy() && self.crop < 32 {
            return bad("adversarial mode needs crop >= 32");
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return bad("baseline_decay must lie in [0, 1)");
        }
        self.detector.validate()?;
        self.strategy.validate()
    }

    /// Whether the corrupted branch is trained at all.
    pub fn uses_corruption(&self) -> bool {
        self.lambda > 0.0
    }

    pub fn uses_strategy(&self) -> bool {
        self.mode == Mode::Adversarial && self.uses_corruption()
    }

    /// Action mask for the configured group; `None` means unrestricted.
    pub fn allowed_actions(&self) -> Option<Vec<bool>> {
        self.action_group.map(|g| {
            CorruptionAction::all()
                .map(|a| a.kind.group() == g)
                .collect()
        })
    }
}

/// Position of the counter-based generators: every draw at a step is
/// derived from `(seed, step)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub detector: Detector,
    pub strategy: StrategyNet,
    pub adam: Adam,
    pub step: u64,
    /// EMA of the rewards; `None` before the first strategy step.
    pub reward_baseline: Option<f64>,
    pub seed: u64,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Self {
        let detector = Detector::new(cfg.detector.clone(), cfg.seed);
        let adam = Adam::new(cfg.lr_d, detector.num_params());
        Self {
            strategy: StrategyNet::new(cfg.strategy.clone(), cfg.seed),
            detector,
            adam,
            step: 0,
            reward_baseline: None,
            seed: cfg.seed,
        }
    }

    pub fn rng_state(&self) -> RngState {
        RngState {
            seed: self.seed,
            step: self.step,
        }
    }
}

/// Identical random flips and crop for an image and its mask.
pub fn augment(image: &GrayImage, mask: &BinaryMask, crop: usize, seed: u64) -> Result<(GrayImage, BinaryMask)> {
    let (h, w) = image.dims();
    if mask.dims() != (h, w) {
        return Err(Error::shape(format!("{h}x{w}"), format!("{}x{}", mask.height(), mask.width())));
    }
    if h < crop || w < crop {
        return Err(Error::InvalidInput(format!("image {h}x{w} is smaller than crop {crop}")));
    }
    let mut r = rng::rng(seed);
    let (mut img, mut m) = (image.clone(), mask.clone());
    if r.gen_bool(0.5) {
        img = img.flip_horizontal();
        m = m.flip_horizontal();
    }
    if r.gen_bool(0.5) {
        img = img.flip_vertical();
        m = m.flip_vertical();
    }
    let top = r.gen_range(0..=h - crop);
    let left = r.gen_range(0..=w - crop);
    Ok((img.crop(top, left, crop, crop), m.crop(top, left, crop, crop)))
}

/// A training batch after augmentation.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    pub images: Vec<GrayImage>,
    pub masks: Vec<BinaryMask>,
}

/// Draws and augments batch `step` from `data`.
pub fn make_batch(data: &[ImageSample], cfg: &TrainConfig, step: u64) -> Result<Batch> {
    let mut r = rng::rng(rng::derive(cfg.seed, Stream::Batch, step));
    let picks: Vec<usize> = (0..cfg.batch_size).map(|_| r.gen_range(0..data.len())).collect();
    let items = par::map_indexed(picks.len(), |i| {
        let s = &data[picks[i]];
        augment(&s.image, &s.mask, cfg.crop, rng::derive2(cfg.seed, Stream::Augment, step, i as u64))
    });
    let mut batch = Batch {
        ids: Vec::new(),
        images: Vec::new(),
        masks: Vec::new(),
    };
    for (i, item) in items.into_iter().enumerate() {
        let (img, m) = item?;
        batch.ids.push(data[picks[i]].id.clone());
        batch.images.push(img);
        batch.masks.push(m);
    }
    Ok(batch)
}

#[derive(Debug, Clone)]
pub struct CorruptedBatch {
    pub images: Vec<GrayImage>,
    pub actions: Vec<CorruptionAction>,
    /// Rewards are filled in by the detector step.
    pub records: Vec<RewardRecord>,
}

/// One action per sample (strategy draw in adversarial mode, uniform over
/// the allowed set otherwise) realized with per-sample derived seeds.
pub fn generate_corrupted_batch(
    state: &TrainState,
    images: &[GrayImage],
    cfg: &TrainConfig,
    table: &CorruptionTable,
) -> Result<CorruptedBatch> {
    let allowed = cfg.allowed_actions();
    let dists = if cfg.mode == Mode::Adversarial {
        let refs: Vec<&GrayImage> = images.iter().collect();
        policy_forward(&state.strategy, &images_to_tensor(&refs)?, allowed.as_deref())?
    } else {
        let uniform = ActionDistribution::from_logits(&[0.0; NUM_ACTIONS], allowed.as_deref())?;
        vec![uniform; images.len()]
    };
    let step = state.step;
    let results = par::map_indexed(images.len(), |i| -> Result<(GrayImage, CorruptionAction, RewardRecord)> {
        let (k, log_prob) = sample_index(&dists[i], rng::derive2(cfg.seed, Stream::Action, step, i as u64))?;
        let action = CorruptionAction::from_index(k)?;
        let img = apply_with(table, &images[i], action, rng::derive2(cfg.seed, Stream::Corrupt, step, i as u64))?;
        Ok((img, action, RewardRecord { action_index: k, log_prob, reward: 0.0 }))
    });
    let mut out = CorruptedBatch {
        images: Vec::new(),
        actions: Vec::new(),
        records: Vec::new(),
    };
    for r in results {
        let (img, a, rec) = r?;
        out.images.push(img);
        out.actions.push(a);
        out.records.push(rec);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLosses {
    pub clean_loss: f64,
    pub cor_loss: f64,
    /// Per-sample corrupted soft-IoU losses, measured before the update.
    pub rewards: Vec<f64>,
}

/// Fills the detector's gradient buffers with `∇ mean_i [L(x_i) + λ L(x̂_i)]`
/// without updating weights. `corrupted = None` is clean-only training.
pub fn detector_gradient(
    detector: &mut Detector,
    ids: &[String],
    clean: &[GrayImage],
    corrupted: Option<&[GrayImage]>,
    masks: &[BinaryMask],
    lambda: f64,
) -> Result<StepLosses> {
    let b = clean.len();
    if masks.len() != b || ids.len() != b || corrupted.is_some_and(|c| c.len() != b) {
        return Err(Error::shape(b, masks.len()));
    }
    let mut refs: Vec<&GrayImage> = clean.iter().collect();
    if let Some(c) = corrupted {
        refs.extend(c.iter());
    }
    let x = images_to_tensor(&refs)?;
    let (prob, cache) = detector.forward_train(&x)?;
    let ys: Vec<Vec<f64>> = masks.iter().map(BinaryMask::as_f64).collect();
    let mut grad = Tensor::zeros(prob.shape);
    let mut clean_loss = 0.0;
    let mut rewards = Vec::new();
    for j in 0..prob.n() {
        let i = j % b;
        let (loss, g) = soft_iou_loss_grad(prob.sample(j), &ys[i]);
        let is_clean = j < b;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "{} loss of sample `{}`",
                if is_clean { "clean" } else { "corrupted" },
                ids[i]
            )));
        }
        let weight = if is_clean { 1.0 } else { lambda } / b as f64;
        grad.sample_mut(j).iter_mut().zip(&g).for_each(|(d, s)| *d = weight * s);
        if is_clean {
            clean_loss += loss;
        } else {
            rewards.push(loss);
        }
    }
    detector.zero_grad();
    detector.backward(&cache, &grad);
    let cor_loss = if rewards.is_empty() {
        0.0
    } else {
        rewards.iter().sum::<f64>() / b as f64
    };
    Ok(StepLosses {
        clean_loss: clean_loss / b as f64,
        cor_loss,
        rewards,
    })
}

/// One adaptive-moment descent step on the cooperative loss.
pub fn detector_step(
    state: &mut TrainState,
    batch: &Batch,
    corrupted: Option<&[GrayImage]>,
    cfg: &TrainConfig,
) -> Result<StepLosses> {
    let losses = detector_gradient(
        &mut state.detector,
        &batch.ids,
        &batch.images,
        corrupted,
        &batch.masks,
        cfg.lambda,
    )?;
    state.adam.update(&mut state.detector);
    if !state.detector.all_finite() {
        return Err(Error::NonFinite(format!("detector weights after step {}", state.step)));
    }
    Ok(losses)
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub clean_loss: f64,
    pub cor_loss: f64,
    /// Batch estimate of the strategy objective (mean reward).
    pub e_hat: f64,
    pub baseline: f64,
    pub action_histogram: [u32; NUM_ACTIONS],
    pub val_iou: Option<f64>,
}

impl LogRow {
    pub const HEADER: &'static str = "step,clean_loss,cor_loss,e_hat,baseline,action_histogram,val_iou";

    pub fn csv(&self) -> String {
        let hist: Vec<String> = self.action_histogram.iter().map(u32::to_string).collect();
        format!(
            "{},{:.9},{:.9},{:.9},{:.9},{},{}",
            self.step,
            self.clean_loss,
            self.cor_loss,
            self.e_hat,
            self.baseline,
            hist.join(" "),
            self.val_iou.map(|v| format!("{v:.6}")).unwrap_or_default()
        )
    }
}

/// Runs one full iteration at `state.step` and advances the counter.
pub fn train_step(
    state: &mut TrainState,
    cfg: &TrainConfig,
    table: &CorruptionTable,
    data: &[ImageSample],
) -> Result<LogRow> {
    let batch = make_batch(data, cfg, state.step)?;
    let corrupted = if cfg.uses_corruption() {
        Some(generate_corrupted_batch(state, &batch.images, cfg, table)?)
    } else {
        None
    };
    let strategy_before = cfg.uses_strategy().then(|| state.strategy.flat_values());
    let losses = detector_step(state, &batch, corrupted.as_ref().map(|c| c.images.as_slice()), cfg)?;
    debug_assert!(strategy_before.map_or(true, |v| v == state.strategy.flat_values()));

    let mut row = LogRow {
        step: state.step,
        clean_loss: losses.clean_loss,
        cor_loss: losses.cor_loss,
        e_hat: 0.0,
        baseline: state.reward_baseline.unwrap_or(0.0),
        action_histogram: [0; NUM_ACTIONS],
        val_iou: None,
    };
    if let Some(mut c) = corrupted {
        for a in &c.actions {
            row.action_histogram[a.index()] += 1;
        }
        let mean_r = losses.rewards.iter().sum::<f64>() / losses.rewards.len() as f64;
        row.e_hat = mean_r;
        if cfg.uses_strategy() {
            for (rec, &r) in c.records.iter_mut().zip(&losses.rewards) {
                rec.reward = r;
            }
            let b = *state.reward_baseline.get_or_insert(mean_r);
            let refs: Vec<&GrayImage> = batch.images.iter().collect();
            let x = images_to_tensor(&refs)?;
            let allowed = cfg.allowed_actions();
            let g = reinforce_gradient(&mut state.strategy, &x, &c.records, b, allowed.as_deref())?;
            strategy_step(&mut state.strategy, &g, cfg.lr_s)?;
            let nb = cfg.baseline_decay * b + (1.0 - cfg.baseline_decay) * mean_r;
            state.reward_baseline = Some(nb);
            row.baseline = nb;
        }
    }
    state.step += 1;
    Ok(row)
}

pub struct TrainOutput {
    pub state: TrainState,
    pub log: Vec<LogRow>,
}

pub fn train(cfg: &TrainConfig, table: &CorruptionTable, data: &[ImageSample], val: &[ImageSample]) -> Result<TrainOutput> {
    train_observed(cfg, table, data, val, |_| {})
}

/// `train` with a callback invoked after every logged step.
pub fn train_observed(
    cfg: &TrainConfig,
    table: &CorruptionTable,
    data: &[ImageSample],
    val: &[ImageSample],
    mut observe: impl FnMut(&LogRow),
) -> Result<TrainOutput> {
    cfg.validate()?;
    table.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    for s in data {
        let (h, w) = s.image.dims();
        if h < cfg.crop || w < cfg.crop {
            return Err(Error::Dataset(format!("sample `{}` ({h}x{w}) is smaller than crop {}", s.id, cfg.crop)));
        }
    }
    let mut state = TrainState::new(cfg);
    let mut log = Vec::with_capacity(cfg.steps as usize);
    let match_cfg = TargetMatchConfig::default();
    while state.step < cfg.steps {
        let mut row = train_step(&mut state, cfg, table, data)?;
        if cfg.val_every > 0 && !val.is_empty() && state.step % cfg.val_every == 0 {
            row.val_iou = Some(clean_metrics(&state.detector, val, &match_cfg)?.iou());
        }
        observe(&row);
        log.push(row);
    }
    Ok(TrainOutput { state, log })
}

/// Dataset-level clean metrics at the default threshold.
pub fn clean_metrics(detector: &Detector, samples: &[ImageSample], match_cfg: &TargetMatchConfig) -> Result<MetricAccumulator> {
    let parts = par::map_slice(samples, |s| -> Result<MetricAccumulator> {
        let prob = detector.forward(&images_to_tensor(&[&s.image])?)?;
        let pred = BinaryMask::threshold(s.image.height(), s.image.width(), &prob.data, match_cfg.binarize_threshold);
        let mut acc = MetricAccumulator::default();
        acc.add(&pred, &s.mask, match_cfg)?;
        Ok(acc)
    });
    let mut total = MetricAccumulator::default();
    for p in parts {
        total.merge(&p?);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_generate, SynthConfig};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            crop: 32,
            steps: 3,
            detector: DetectorConfig { channels: [2, 4, 4], sfim: true },
            strategy: StrategyNetConfig { base_channels: 2 },
            ..Default::default()
        }
    }

    fn data(n: usize) -> Vec<ImageSample> {
        synth_generate(&SynthConfig { count: n, size: 32, ..Default::default() }).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { crop: 60, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lr_s: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lambda: -1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { crop: 16, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { crop: 16, mode: Mode::Joint, ..Default::default() }.validate().is_ok());
        assert_eq!("joint".parse::<Mode>().unwrap(), Mode::Joint);
        assert!("greedy".parse::<Mode>().is_err());
    }

    #[test]
    fn augment_contract() {
        let s = &data(1)[0];
        let a = augment(&s.image, &s.mask, 24, 5).unwrap();
        assert_eq!(a, augment(&s.image, &s.mask, 24, 5).unwrap());
        assert_eq!(a.0.dims(), (24, 24));
        assert!(a.1.count() <= s.mask.count());
        assert!(a.1.values().iter().all(|&v| v <= 1));
        assert!(augment(&s.image, &s.mask, 40, 5).is_err());
        let h = s.image.flip_horizontal().flip_horizontal();
        assert_eq!(h, s.image);
    }

    #[test]
    fn zero_steps_returns_initial_state() {
        let cfg = TrainConfig { steps: 0, ..tiny_cfg() };
        let out = train(&cfg, &CorruptionTable::default(), &data(2), &[]).unwrap();
        assert!(out.log.is_empty());
        assert_eq!(out.state, TrainState::new(&cfg));
    }

    #[test]
    fn crop_larger_than_data_rejected() {
        let cfg = TrainConfig { crop: 64, ..tiny_cfg() };
        assert!(matches!(train(&cfg, &CorruptionTable::default(), &data(2), &[]), Err(Error::Dataset(_))));
        assert!(train(&tiny_cfg(), &CorruptionTable::default(), &[], &[]).is_err());
    }

    #[test]
    fn baseline_tracks_rewards() {
        let out = train(&tiny_cfg(), &CorruptionTable::default(), &data(3), &[]).unwrap();
        assert_eq!(out.log.len(), 3);
        assert_eq!(out.state.step, 3);
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for row in &out.log {
            lo = lo.min(row.e_hat);
            hi = hi.max(row.e_hat);
            assert!(row.baseline >= lo - 1e-12 && row.baseline <= hi + 1e-12);
            assert_eq!(row.action_histogram.iter().sum::<u32>(), 2);
        }
    }

    #[test]
    fn lambda_zero_skips_corruption() {
        let cfg = TrainConfig { lambda: 0.0, mode: Mode::Joint, ..tiny_cfg() };
        let out = train(&cfg, &CorruptionTable::default(), &data(3), &[]).unwrap();
        assert!(out.log.iter().all(|r| r.cor_loss == 0.0 && r.action_histogram == [0; NUM_ACTIONS]));
    }
}
