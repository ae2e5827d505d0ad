//! Compact three-level U-shaped segmenter with one SFIM per encoder level and
//! a 1×1 convolution + sigmoid head.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{GrayImage, ProbabilityMap};
use crate::nn::{concat_channels, split_channels, Conv2d, MaxPool2, Param, ParamSet, Relu, Tensor, Upsample2};
use crate::rng::{self, Rng, Stream};
use crate::sfim::{Sfim, SfimCache};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    /// Feature widths of the three resolution levels.
    pub channels: [usize; 3],
    /// `false` removes the frequency path of every SFIM, keeping the
    /// residual block.
    pub sfim: bool,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            channels: [16, 32, 64],
            sfim: true,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) {
            return Err(Error::Config("detector channels must be positive".into()));
        }
        Ok(())
    }

    /// Architecture fingerprint stored next to the weights.
    pub fn fingerprint(&self) -> String {
        let [a, b, c] = self.channels;
        format!(
            "unet3-{}-c{a}.{b}.{c}",
            if self.sfim { "sfim" } else { "nosfim" }
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub config: DetectorConfig,
    enc1: Conv2d,
    sfim1: Sfim,
    enc2: Conv2d,
    sfim2: Sfim,
    enc3: Conv2d,
    sfim3: Sfim,
    dec2: Conv2d,
    dec1: Conv2d,
    head: Conv2d,
}

pub struct DetectorCache {
    input: Tensor,
    e1: Tensor,
    s1: SfimCache,
    s1_out: Tensor,
    p1: (Tensor, Vec<u32>),
    e2: Tensor,
    s2: SfimCache,
    s2_out: Tensor,
    p2: (Tensor, Vec<u32>),
    e3: Tensor,
    s3: SfimCache,
    cat2: Tensor,
    d2: Tensor,
    cat1: Tensor,
    d1: Tensor,
    prob: Tensor,
}

impl Detector {
    pub fn new(config: DetectorConfig, seed: u64) -> Self {
        let mut r: Rng = rng::rng(rng::derive(seed, Stream::Init, 0xD));
        let [c1, c2, c3] = config.channels;
        let s = config.sfim;
        Self {
            enc1: Conv2d::new("enc1", 1, c1, 3, 1, 1, &mut r),
            sfim1: Sfim::new("sfim1", c1, s, &mut r),
            enc2: Conv2d::new("enc2", c1, c2, 3, 1, 1, &mut r),
            sfim2: Sfim::new("sfim2", c2, s, &mut r),
            enc3: Conv2d::new("enc3", c2, c3, 3, 1, 1, &mut r),
            sfim3: Sfim::new("sfim3", c3, s, &mut r),
            dec2: Conv2d::new("dec2", c3 + c2, c2, 3, 1, 1, &mut r),
            dec1: Conv2d::new("dec1", c2 + c1, c1, 3, 1, 1, &mut r),
            head: Conv2d::new("head", c1, 1, 1, 1, 0, &mut r),
            config,
        }
    }

    pub fn zero_head(&mut self) {
        self.head.weight.value.fill(0.0);
        self.head.bias.value.fill(0.0);
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.c() != 1 {
            return Err(Error::shape("1 input channel", x.c()));
        }
        if x.h() % 8 != 0 || x.w() % 8 != 0 || x.h() < 16 || x.w() < 16 {
            return Err(Error::InvalidInput(format!(
                "detector input must be at least 16x16 with sides divisible by 8, got {}x{}",
                x.h(),
                x.w()
            )));
        }
        if !x.is_finite() {
            return Err(Error::NonFinite("detector input".into()));
        }
        Ok(())
    }

    /// Probabilities `N×1×H×W` plus everything backward needs.
    pub fn forward_train(&self, x: &Tensor) -> Result<(Tensor, DetectorCache)> {
        self.check_input(x)?;
        let finite = |t: &Tensor, stage: &str| -> Result<()> {
            if t.is_finite() {
                Ok(())
            } else {
                Err(Error::NonFinite(format!("detector {stage}")))
            }
        };
        let e1 = Relu::forward(&self.enc1.forward(x));
        let (s1_out, s1) = self.sfim1.forward(&e1)?;
        let p1 = MaxPool2::forward(&s1_out);
        let e2 = Relu::forward(&self.enc2.forward(&p1.0));
        let (s2_out, s2) = self.sfim2.forward(&e2)?;
        let p2 = MaxPool2::forward(&s2_out);
        let e3 = Relu::forward(&self.enc3.forward(&p2.0));
        let (s3_out, s3) = self.sfim3.forward(&e3)?;
        finite(&s3_out, "encoder")?;
        let cat2 = concat_channels(&Upsample2::forward(&s3_out), &s2_out);
        let d2 = Relu::forward(&self.dec2.forward(&cat2));
        let cat1 = concat_channels(&Upsample2::forward(&d2), &s1_out);
        let d1 = Relu::forward(&self.dec1.forward(&cat1));
        let mut prob = self.head.forward(&d1);
        finite(&prob, "head")?;
        prob.data.iter_mut().for_each(|z| *z = sigmoid(*z));
        Ok((
            prob.clone(),
            DetectorCache {
                input: x.clone(),
                e1,
                s1,
                s1_out,
                p1,
                e2,
                s2,
                s2_out,
                p2,
                e3,
                s3,
                cat2,
                d2,
                cat1,
                d1,
                prob,
            },
        ))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_train(x).map(|(p, _)| p)
    }

    /// Accumulates parameter gradients given `dL/dprob`.
    pub fn backward(&mut self, cache: &DetectorCache, grad_prob: &Tensor) {
        let [c1, c2, _] = self.config.channels;
        let mut gz = grad_prob.clone();
        for (g, p) in gz.data.iter_mut().zip(&cache.prob.data) {
            *g *= p * (1.0 - p);
        }
        let gd1 = self.head.backward(&cache.d1, &gz, true).expect("grad");
        let gd1 = Relu::backward(&cache.d1, &gd1);
        let gcat1 = self.dec1.backward(&cache.cat1, &gd1, true).expect("grad");
        let (gup1, mut gs1) = split_channels(&gcat1, c2);
        let gd2 = Relu::backward(&cache.d2, &Upsample2::backward(&gup1));
        let gcat2 = self.dec2.backward(&cache.cat2, &gd2, true).expect("grad");
        let (gup2, mut gs2) = split_channels(&gcat2, gcat2.c() - c2);
        let gs3 = Upsample2::backward(&gup2);

        let ge3 = self.sfim3.backward(&cache.s3, &gs3);
        let ge3 = Relu::backward(&cache.e3, &ge3);
        let gp2 = self.enc3.backward(&cache.p2.0, &ge3, true).expect("grad");
        gs2.add_assign(&MaxPool2::backward(cache.s2_out.shape, &cache.p2.1, &gp2));

        let ge2 = self.sfim2.backward(&cache.s2, &gs2);
        let ge2 = Relu::backward(&cache.e2, &ge2);
        let gp1 = self.enc2.backward(&cache.p1.0, &ge2, true).expect("grad");
        gs1.add_assign(&MaxPool2::backward(cache.s1_out.shape, &cache.p1.1, &gp1));

        let ge1 = self.sfim1.backward(&cache.s1, &gs1);
        let ge1 = Relu::backward(&cache.e1, &ge1);
        self.enc1.backward(&cache.input, &ge1, false);
        let _ = c1;
    }
}

impl ParamSet for Detector {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.enc1.params();
        v.extend(self.sfim1.params());
        v.extend(self.enc2.params());
        v.extend(self.sfim2.params());
        v.extend(self.enc3.params());
        v.extend(self.sfim3.params());
        v.extend(self.dec2.params());
        v.extend(self.dec1.params());
        v.extend(self.head.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.enc1.params_mut();
        v.extend(self.sfim1.params_mut());
        v.extend(self.enc2.params_mut());
        v.extend(self.sfim2.params_mut());
        v.extend(self.enc3.params_mut());
        v.extend(self.sfim3.params_mut());
        v.extend(self.dec2.params_mut());
        v.extend(self.dec1.params_mut());
        v.extend(self.head.params_mut());
        v
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Stack images into an `N×1×H×W` tensor.
pub fn images_to_tensor(images: &[&GrayImage]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidInput("empty image batch".into()))?;
    let (h, w) = first.dims();
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if img.dims() != (h, w) {
            return Err(Error::shape(format!("{h}x{w}"), format!("{:?}", img.dims())));
        }
        data.extend_from_slice(img.pixels());
    }
    Tensor::from_vec([images.len(), 1, h, w], data)
}

/// Full-resolution probability map for one image.
pub fn detector_forward(detector: &Detector, image: &GrayImage) -> Result<ProbabilityMap> {
    let x = images_to_tensor(&[image])?;
    let p = detector.forward(&x)?;
    Ok(ProbabilityMap {
        height: image.height(),
        width: image.width(),
        values: p.data,
    })
}

/// Probability maps for a batch of same-sized images.
pub fn detector_forward_batch(detector: &Detector, images: &[&GrayImage]) -> Result<Vec<ProbabilityMap>> {
    let x = images_to_tensor(images)?;
    let p = detector.forward(&x)?;
    let (h, w) = (x.h(), x.w());
    Ok((0..x.n())
        .map(|i| ProbabilityMap {
            height: h,
            width: w,
            values: p.sample(i).to_vec(),
        })
        .collect())
}
