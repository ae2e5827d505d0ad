//! Corruption strategy network and its score-function training machinery.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corruption::{CorruptionAction, NUM_ACTIONS};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, GlobalAvgPool, LayerNorm, LayerNormCache, Linear, Param, ParamSet, Relu, Tensor};
use crate::rng::{self, Rng, Stream};

/// Anything mapping a batch of images to per-sample action logits.
pub trait Policy: ParamSet {
    type Cache;

    fn num_actions(&self) -> usize;

    /// Row-major `N × num_actions` logits.
    fn logits_train(&self, x: &Tensor) -> Result<(Vec<f64>, Self::Cache)>;

    /// Accumulates parameter gradients for `d objective / d logits`.
    fn backward(&mut self, cache: &Self::Cache, grad_logits: &[f64]);

    fn logits(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self.logits_train(x)?.0)
    }
}

pub const STRATEGY_BLOCKS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategyNetConfig {
    pub base_channels: usize,
}

impl Default for StrategyNetConfig {
    fn default() -> Self {
        Self { base_channels: 16 }
    }
}

impl StrategyNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::Config("strategy base_channels must be positive".into()));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        format!("strategy{STRATEGY_BLOCKS}-b{}-a{NUM_ACTIONS}", self.base_channels)
    }
}

/// Five `conv3×3/2 → LayerNorm → ReLU` blocks, global average pooling and
/// one fully-connected layer to the 30 action logits.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyNet {
    pub config: StrategyNetConfig,
    convs: Vec<Conv2d>,
    norms: Vec<LayerNorm>,
    head: Linear,
}

pub struct StrategyCache {
    inputs: Vec<Tensor>,
    norms: Vec<LayerNormCache>,
    acts: Vec<Tensor>,
    pooled: Tensor,
}

impl StrategyNet {
    /// Random backbone, zero head: the initial distribution is uniform.
    pub fn new(config: StrategyNetConfig, seed: u64) -> Self {
        let mut r: Rng = rng::rng(rng::derive(seed, Stream::Init, 0x5));
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut cin = 1;
        for b in 0..STRATEGY_BLOCKS {
            let cout = config.base_channels << b;
            convs.push(Conv2d::new(&format!("block{b}.conv"), cin, cout, 3, 2, 1, &mut r));
            norms.push(LayerNorm::new(&format!("block{b}.norm"), cout));
            cin = cout;
        }
        Self {
            head: Linear::zeros("head", cin, NUM_ACTIONS),
            config,
            convs,
            norms,
        }
    }

    pub fn check_input(x: &Tensor) -> Result<()> {
        if x.c() != 1 {
            return Err(Error::shape("1 input channel", x.c()));
        }
        let min = 1 << STRATEGY_BLOCKS;
        if x.h() < min || x.w() < min {
            return Err(Error::InvalidInput(format!(
                "strategy input must be at least {min}x{min}, got {}x{}",
                x.h(),
                x.w()
            )));
        }
        Ok(())
    }
}

impl Policy for StrategyNet {
    type Cache = StrategyCache;

    fn num_actions(&self) -> usize {
        NUM_ACTIONS
    }

    fn logits_train(&self, x: &Tensor) -> Result<(Vec<f64>, StrategyCache)> {
        Self::check_input(x)?;
        let mut inputs = Vec::with_capacity(STRATEGY_BLOCKS);
        let mut norms = Vec::with_capacity(STRATEGY_BLOCKS);
        let mut acts = Vec::with_capacity(STRATEGY_BLOCKS);
        let mut h = x.clone();
        for (b, (conv, norm)) in self.convs.iter().zip(&self.norms).enumerate() {
            let z = conv.forward(&h);
            let (n, cache) = norm.forward(&z);
            let a = Relu::forward(&n);
            if !a.is_finite() {
                return Err(Error::NonFinite(format!("strategy block {b}")));
            }
            inputs.push(std::mem::replace(&mut h, a.clone()));
            norms.push(cache);
            acts.push(a);
        }
        let pooled = GlobalAvgPool::forward(&h);
        let logits = self.head.forward(&pooled);
        if !logits.is_finite() {
            return Err(Error::NonFinite("strategy head".into()));
        }
        Ok((logits.data, StrategyCache { inputs, norms, acts, pooled }))
    }

    fn backward(&mut self, cache: &StrategyCache, grad_logits: &[f64]) {
        let n = cache.pooled.n();
        let gy = Tensor::from_vec([n, NUM_ACTIONS, 1, 1], grad_logits.to_vec()).expect("logit gradient shape");
        let gp = self.head.backward(&cache.pooled, &gy);
        let mut g = GlobalAvgPool::backward(cache.acts[STRATEGY_BLOCKS - 1].shape, &gp);
        for b in (0..STRATEGY_BLOCKS).rev() {
            let gn = Relu::backward(&cache.acts[b], &g);
            let gz = self.norms[b].backward(&cache.norms[b], &gn);
            match self.convs[b].backward(&cache.inputs[b], &gz, b > 0) {
                Some(gx) => g = gx,
                None => break,
            }
        }
    }
}

impl ParamSet for StrategyNet {
    fn params(&self) -> Vec<&Param> {
        let mut v = Vec::new();
        for (c, n) in self.convs.iter().zip(&self.norms) {
            v.extend(c.params());
            v.extend(n.params());
        }
        v.extend(self.head.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = Vec::new();
        for (c, n) in self.convs.iter_mut().zip(self.norms.iter_mut()) {
            v.extend(c.params_mut());
            v.extend(n.params_mut());
        }
        v.extend(self.head.params_mut());
        v
    }
}

/// Linear head on flattened pixels; small enough to enumerate exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPolicy {
    pub layer: Linear,
}

impl LinearPolicy {
    pub fn new(pixels: usize, actions: usize, seed: u64) -> Self {
        let mut r = rng::rng(rng::derive(seed, Stream::Init, 0x11));
        let mut layer = Linear::zeros("linear", pixels, actions);
        layer.weight.value.iter_mut().for_each(|v| *v = r.gen_range(-0.5..0.5));
        layer.bias.value.iter_mut().for_each(|v| *v = r.gen_range(-0.5..0.5));
        Self { layer }
    }
}

impl Policy for LinearPolicy {
    type Cache = Tensor;

    fn num_actions(&self) -> usize {
        self.layer.fan_out
    }

    fn logits_train(&self, x: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        if x.sample_len() != self.layer.fan_in {
            return Err(Error::shape(self.layer.fan_in, x.sample_len()));
        }
        let flat = Tensor::from_vec([x.n(), x.sample_len(), 1, 1], x.data.clone())?;
        Ok((self.layer.forward(&flat).data, flat))
    }

    fn backward(&mut self, cache: &Tensor, grad_logits: &[f64]) {
        let gy = Tensor::from_vec([cache.n(), self.layer.fan_out, 1, 1], grad_logits.to_vec())
            .expect("logit gradient shape");
        self.layer.backward(cache, &gy);
    }
}

impl ParamSet for LinearPolicy {
    fn params(&self) -> Vec<&Param> {
        self.layer.params()
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layer.params_mut()
    }
}

/// Per-sample categorical distribution over actions.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionDistribution {
    pub probs: Vec<f64>,
}

impl ActionDistribution {
    pub fn uniform(n: usize) -> Self {
        Self { probs: vec![1.0 / n as f64; n] }
    }

    /// Softmax over the allowed entries; disallowed actions get probability 0.
    pub fn from_logits(logits: &[f64], allowed: Option<&[bool]>) -> Result<Self> {
        if let Some(a) = allowed {
            if a.len() != logits.len() {
                return Err(Error::shape(logits.len(), a.len()));
            }
            if !a.iter().any(|&x| x) {
                return Err(Error::InvalidInput("action mask allows nothing".into()));
            }
        }
        let ok = |k: usize| allowed.is_none_or(|a| a[k]);
        let max = (0..logits.len())
            .filter(|&k| ok(k))
            .map(|k| logits[k])
            .fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::NonFinite("logits".into()));
        }
        let mut probs: Vec<f64> = (0..logits.len())
            .map(|k| if ok(k) { (logits[k] - max).exp() } else { 0.0 })
            .collect();
        let z: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= z);
        Ok(Self { probs })
    }

    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::NonFinite("action probabilities".into()));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidInput(format!("probabilities sum to {s}")));
        }
        Ok(Self { probs })
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (k, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = k;
            }
        }
        best
    }
}

/// One strategy decision and the loss it produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub action_index: usize,
    pub log_prob: f64,
    pub reward: f64,
}

pub fn policy_forward<P: Policy>(policy: &P, x: &Tensor, allowed: Option<&[bool]>) -> Result<Vec<ActionDistribution>> {
    let logits = policy.logits(x)?;
    logits
        .chunks(policy.num_actions())
        .map(|l| ActionDistribution::from_logits(l, allowed))
        .collect()
}

/// Categorical draw; returns the index and its log-probability.
pub fn sample_index(dist: &ActionDistribution, seed: u64) -> Result<(usize, f64)> {
    if dist.probs.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("action probabilities".into()));
    }
    let u: f64 = rng::rng(seed).gen();
    let mut acc = 0.0;
    let mut last = None;
    for (k, &p) in dist.probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = Some(k);
        if u < acc {
            return Ok((k, p.ln()));
        }
    }
    // Rounding left u above the cumulative sum: take the last live action.
    let k = last.ok_or_else(|| Error::InvalidInput("distribution has no mass".into()))?;
    Ok((k, dist.probs[k].ln()))
}

pub fn sample_action(dist: &ActionDistribution, seed: u64) -> Result<(CorruptionAction, f64)> {
    if dist.probs.len() != NUM_ACTIONS {
        return Err(Error::shape(NUM_ACTIONS, dist.probs.len()));
    }
    let (k, lp) = sample_index(dist, seed)?;
    Ok((CorruptionAction::from_index(k)?, lp))
}

/// `Σ_k rewards[k] · probs[k]`.
pub fn expected_objective(dist: &ActionDistribution, rewards: &[f64]) -> Result<f64> {
    if rewards.len() != dist.probs.len() {
        return Err(Error::shape(dist.probs.len(), rewards.len()));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("rewards".into()));
    }
    Ok(dist.probs.iter().zip(rewards).map(|(p, r)| p * r).sum())
}

/// `(1/N) Σ_i (r_i − b) ∇θ log p(s_i | x_i)`, returned flat in parameter
/// order. The policy's gradient buffers are overwritten.
pub fn reinforce_gradient<P: Policy>(
    policy: &mut P,
    x: &Tensor,
    records: &[RewardRecord],
    baseline: f64,
    allowed: Option<&[bool]>,
) -> Result<Vec<f64>> {
    if records.len() != x.n() {
        return Err(Error::shape(x.n(), records.len()));
    }
    if !baseline.is_finite() || records.iter().any(|r| !r.reward.is_finite()) {
        return Err(Error::NonFinite("reward".into()));
    }
    let a = policy.num_actions();
    let (logits, cache) = policy.logits_train(x)?;
    let n = records.len() as f64;
    let mut grad_logits = vec![0.0; logits.len()];
    for (i, rec) in records.iter().enumerate() {
        if rec.action_index >= a {
            return Err(Error::InvalidInput(format!("action index {} out of range", rec.action_index)));
        }
        let dist = ActionDistribution::from_logits(&logits[i * a..(i + 1) * a], allowed)?;
        let adv = (rec.reward - baseline) / n;
        for k in 0..a {
            let onehot = if k == rec.action_index { 1.0 } else { 0.0 };
            grad_logits[i * a + k] = adv * (onehot - dist.probs[k]);
        }
    }
    policy.zero_grad();
    policy.backward(&cache, &grad_logits);
    let g = policy.flat_grads();
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("strategy gradient".into()));
    }
    Ok(g)
}

/// Gradient ascent: `θ ← θ + lr · g`.
pub fn strategy_step<P: ParamSet + ?Sized>(policy: &mut P, gradient: &[f64], lr: f64) -> Result<()> {
    if gradient.len() != policy.num_params() {
        return Err(Error::shape(policy.num_params(), gradient.len()));
    }
    if gradient.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("strategy gradient".into()));
    }
    let mut off = 0;
    for p in policy.params_mut() {
        for v in p.value.iter_mut() {
            *v += lr * gradient[off];
            off += 1;
        }
    }
    Ok(())
}
