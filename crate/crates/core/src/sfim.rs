//! Spatial-frequency interaction module.
//!
//! `x → rfft2 → frequency stage → irfft2 → residual spatial block`.
//! The frequency stage treats the real and imaginary half-spectrum planes as
//! `2C` channels: a depthwise 3×3 convolution over the frequency plane, a
//! per-channel PReLU, then a 1×1 convolution mixing all `2C` channels.

use crate::error::{Error, Result};
use crate::nn::fft::{self, FrequencyPair};
use crate::nn::{concat_channels, split_channels, Conv2d, DepthwiseConv3x3, PRelu, Param, ParamSet, Relu, Tensor};
use crate::rng::Rng;

/// Learnable refinement applied to a [`FrequencyPair`].
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyStage {
    pub name: String,
    pub channels: usize,
    pub depthwise: DepthwiseConv3x3,
    pub act: PRelu,
    pub mix: Conv2d,
}

pub struct FrequencyCache {
    stacked: Tensor,
    depthwise_out: Tensor,
    act_out: Tensor,
    width: usize,
}

impl FrequencyStage {
    /// Identity plus small noise: delta kernels, identity mixing, unit slope.
    pub fn new(name: &str, channels: usize, rng: &mut Rng) -> Self {
        let mut stage = Self::identity(name, channels);
        stage.depthwise = DepthwiseConv3x3::near_identity(&format!("{name}.freq_dw"), 2 * channels, 0.02, rng);
        let jitter = Conv2d::new("tmp", 2 * channels, 2 * channels, 1, 1, 0, rng);
        for (w, j) in stage.mix.weight.value.iter_mut().zip(&jitter.weight.value) {
            *w += 0.02 * j;
        }
        stage
    }

    /// Exactly the identity map on the pair.
    pub fn identity(name: &str, channels: usize) -> Self {
        let c2 = 2 * channels;
        let mut rng = crate::rng::rng(0);
        let depthwise = DepthwiseConv3x3::near_identity(&format!("{name}.freq_dw"), c2, 0.0, &mut rng);
        let mut mix = Conv2d::zeros(&format!("{name}.freq_mix"), c2, c2, 1, 1, 0);
        for i in 0..c2 {
            mix.weight.value[i * c2 + i] = 1.0;
        }
        Self {
            name: name.to_string(),
            channels,
            depthwise,
            act: PRelu::new(&format!("{name}.freq_act"), c2, 1.0),
            mix,
        }
    }

    pub fn forward(&self, pair: &FrequencyPair) -> Result<(FrequencyPair, FrequencyCache)> {
        if pair.real.c() != self.channels {
            return Err(Error::shape(
                format!("{} channels", self.channels),
                format!("{} channels", pair.real.c()),
            ));
        }
        let stacked = concat_channels(&pair.real, &pair.imag);
        let depthwise_out = self.depthwise.forward(&stacked);
        let act_out = self.act.forward(&depthwise_out);
        let mixed = self.mix.forward(&act_out);
        if !mixed.is_finite() {
            return Err(Error::NonFinite(format!("{} frequency stage", self.name)));
        }
        let (real, imag) = split_channels(&mixed, self.channels);
        Ok((
            FrequencyPair {
                real,
                imag,
                width: pair.width,
            },
            FrequencyCache {
                stacked,
                depthwise_out,
                act_out,
                width: pair.width,
            },
        ))
    }

    pub fn backward(&mut self, cache: &FrequencyCache, grad: &FrequencyPair) -> FrequencyPair {
        let g = concat_channels(&grad.real, &grad.imag);
        let g = self.mix.backward(&cache.act_out, &g, true).expect("input grad");
        let g = self.act.backward(&cache.depthwise_out, &g);
        let g = self.depthwise.backward(&cache.stacked, &g);
        let (real, imag) = split_channels(&g, self.channels);
        FrequencyPair {
            real,
            imag,
            width: cache.width,
        }
    }
}

impl ParamSet for FrequencyStage {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.depthwise.params();
        v.extend(self.act.params());
        v.extend(self.mix.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.depthwise.params_mut();
        v.extend(self.act.params_mut());
        v.extend(self.mix.params_mut());
        v
    }
}

/// Refine a frequency pair with one stage.
pub fn frequency_refine(pair: &FrequencyPair, stage: &FrequencyStage) -> Result<FrequencyPair> {
    stage.forward(pair).map(|(p, _)| p)
}

/// `x + conv2(relu(conv1(x)))` with 3×3 convolutions.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

pub struct ResidualCache {
    input: Tensor,
    hidden: Tensor,
}

impl ResidualBlock {
    pub fn new(name: &str, channels: usize, rng: &mut Rng) -> Self {
        let conv1 = Conv2d::new(&format!("{name}.res1"), channels, channels, 3, 1, 1, rng);
        let mut conv2 = Conv2d::new(&format!("{name}.res2"), channels, channels, 3, 1, 1, rng);
        conv2.weight.value.iter_mut().for_each(|w| *w *= 0.1);
        Self { conv1, conv2 }
    }

    pub fn zero_branch(&mut self) {
        self.conv2.weight.value.fill(0.0);
        self.conv2.bias.value.fill(0.0);
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, ResidualCache) {
        let hidden = Relu::forward(&self.conv1.forward(x));
        let mut y = self.conv2.forward(&hidden);
        y.add_assign(x);
        (
            y,
            ResidualCache {
                input: x.clone(),
                hidden,
            },
        )
    }

    pub fn backward(&mut self, cache: &ResidualCache, gy: &Tensor) -> Tensor {
        let gh = self.conv2.backward(&cache.hidden, gy, true).expect("input grad");
        let gh = Relu::backward(&cache.hidden, &gh);
        let mut gx = self.conv1.backward(&cache.input, &gh, true).expect("input grad");
        gx.add_assign(gy);
        gx
    }
}

impl ParamSet for ResidualBlock {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.conv1.params();
        v.extend(self.conv2.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.conv1.params_mut();
        v.extend(self.conv2.params_mut());
        v
    }
}

/// One SFIM. Without a frequency stage it degenerates to the residual block
/// alone (the ablated variant).
#[derive(Debug, Clone, PartialEq)]
pub struct Sfim {
    pub frequency: Option<FrequencyStage>,
    pub residual: ResidualBlock,
}

pub struct SfimCache {
    freq: Option<FrequencyCache>,
    residual: ResidualCache,
}

pub const MIN_SIDE: usize = 4;

impl Sfim {
    pub fn new(name: &str, channels: usize, with_frequency: bool, rng: &mut Rng) -> Self {
        let frequency = with_frequency.then(|| FrequencyStage::new(name, channels, rng));
        Self {
            frequency,
            residual: ResidualBlock::new(name, channels, rng),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, SfimCache)> {
        if x.h() < MIN_SIDE || x.w() < MIN_SIDE {
            return Err(Error::InvalidInput(format!(
                "SFIM needs H, W >= {MIN_SIDE}, got {}x{}",
                x.h(),
                x.w()
            )));
        }
        let (spatial, freq) = match &self.frequency {
            Some(stage) => {
                let (refined, cache) = stage.forward(&fft::rfft2(x))?;
                (fft::irfft2(&refined), Some(cache))
            }
            None => (x.clone(), None),
        };
        let (y, residual) = self.residual.forward(&spatial);
        if !y.is_finite() {
            return Err(Error::NonFinite("SFIM residual block".into()));
        }
        Ok((y, SfimCache { freq, residual }))
    }

    pub fn backward(&mut self, cache: &SfimCache, gy: &Tensor) -> Tensor {
        let gs = self.residual.backward(&cache.residual, gy);
        match (&mut self.frequency, &cache.freq) {
            (Some(stage), Some(fc)) => {
                let g_refined = fft::irfft2_backward(&gs);
                let g_pair = stage.backward(fc, &g_refined);
                fft::rfft2_backward(&g_pair)
            }
            _ => gs,
        }
    }
}

impl ParamSet for Sfim {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.frequency.as_ref().map(|f| f.params()).unwrap_or_default();
        v.extend(self.residual.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.frequency.as_mut().map(|f| f.params_mut()).unwrap_or_default();
        v.extend(self.residual.params_mut());
        v
    }
}

/// Forward pass of one module on a feature map.
pub fn sfim_forward(feature: &Tensor, module: &Sfim) -> Result<Tensor> {
    module.forward(feature).map(|(y, _)| y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;

    fn rand_tensor(shape: [usize; 4], seed: u64) -> Tensor {
        let mut r = rng::rng(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_stage_is_exact() {
        let x = rand_tensor([1, 3, 8, 8], 1);
        let pair = fft::rfft2(&x);
        let stage = FrequencyStage::identity("s", 3);
        let out = frequency_refine(&pair, &stage).unwrap();
        assert_eq!(out, pair);
    }

    #[test]
    fn zero_pair_stays_zero() {
        let mut r = rng::rng(5);
        let stage = FrequencyStage::new("s", 2, &mut r);
        let pair = FrequencyPair::zeros([1, 2, 8, 5], 8);
        let out = frequency_refine(&pair, &stage).unwrap();
        assert!(out.real.data.iter().chain(&out.imag.data).all(|&v| v == 0.0));
    }

    #[test]
    fn identity_module_round_trips() {
        let mut r = rng::rng(2);
        let mut m = Sfim::new("m", 4, true, &mut r);
        m.frequency = Some(FrequencyStage::identity("m", 4));
        m.residual.zero_branch();
        let x = rand_tensor([2, 4, 8, 12], 3);
        assert!(sfim_forward(&x, &m).unwrap().max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn rejects_tiny_features_and_channel_mismatch() {
        let mut r = rng::rng(2);
        let m = Sfim::new("m", 2, true, &mut r);
        assert!(sfim_forward(&rand_tensor([1, 2, 2, 8], 0), &m).is_err());
        assert!(sfim_forward(&rand_tensor([1, 3, 8, 8], 0), &m).is_err());
    }

    #[test]
    fn ablated_module_is_residual_only() {
        let mut r = rng::rng(7);
        let m = Sfim::new("m", 2, false, &mut r);
        let x = rand_tensor([1, 2, 6, 6], 8);
        let (want, _) = m.residual.forward(&x);
        assert_eq!(sfim_forward(&x, &m).unwrap(), want);
    }
}
