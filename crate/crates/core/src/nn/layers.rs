use std::borrow::Cow;

use rand_distr::{Distribution, Normal};

use super::gemm::gemm;
use super::{Param, ParamSet, Tensor};
use crate::par;
use crate::rng::Rng;

fn he_normal(fan_in: usize, n: usize, rng: &mut Rng) -> Vec<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| normal.sample(rng)).collect()
}

/// Sums per-sample gradient contributions in sample order.
fn reduce_into(param: &mut Param, parts: impl Iterator<Item = Vec<f64>>) {
    for p in parts {
        param.accumulate(&p);
    }
}

/// 2-D convolution with square kernel, zero padding, im2col + GEMM.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> Self {
        let n = cout * cin * k * k;
        Self {
            weight: Param::new(
                format!("{name}.weight"),
                vec![cout, cin, k, k],
                he_normal(cin * k * k, n, rng),
            ),
            bias: Param::zeros(format!("{name}.bias"), vec![cout]),
            cin,
            cout,
            k,
            stride,
            pad,
        }
    }

    pub fn zeros(name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self {
            weight: Param::zeros(format!("{name}.weight"), vec![cout, cin, k, k]),
            bias: Param::zeros(format!("{name}.bias"), vec![cout]),
            cin,
            cout,
            k,
            stride,
            pad,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, x: &[f64], h: usize, w: usize) -> Vec<f64> {
        let (ho, wo) = self.out_hw(h, w);
        let k = self.k;
        let mut cols = vec![0.0; self.cin * k * k * ho * wo];
        for ci in 0..self.cin {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + ky) * k + kx) * ho * wo;
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let dst = &mut cols[row + oy * wo..row + (oy + 1) * wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], h: usize, w: usize) -> Vec<f64> {
        let (ho, wo) = self.out_hw(h, w);
        let k = self.k;
        let mut x = vec![0.0; self.cin * h * w];
        for ci in 0..self.cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + ky) * k + kx) * ho * wo;
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = ci * h * w + iy as usize * w;
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                x[base + ix as usize] += cols[row + oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c(), self.cin, "{}: channel mismatch", self.weight.name);
        let (h, w) = (x.h(), x.w());
        let (ho, wo) = self.out_hw(h, w);
        let hw = ho * wo;
        let ckk = self.cin * self.k * self.k;
        let mut out = Tensor::zeros([x.n(), self.cout, ho, wo]);
        par::for_each_chunk_mut(&mut out.data, self.cout * hw, |i, y| {
            let xs = x.sample(i);
            let cols: Cow<[f64]> = if self.pointwise() {
                Cow::Borrowed(xs)
            } else {
                Cow::Owned(self.im2col(xs, h, w))
            };
            for (co, b) in self.bias.value.iter().enumerate() {
                y[co * hw..(co + 1) * hw].fill(*b);
            }
            gemm(self.cout, ckk, hw, &self.weight.value, false, &cols, false, 1.0, y);
        });
        out
    }

    /// Accumulates weight/bias gradients; returns the input gradient when
    /// `need_input_grad` is set.
    pub fn backward(&mut self, x: &Tensor, gy: &Tensor, need_input_grad: bool) -> Option<Tensor> {
        let (h, w) = (x.h(), x.w());
        let (ho, wo) = self.out_hw(h, w);
        let hw = ho * wo;
        let ckk = self.cin * self.k * self.k;
        let cout = self.cout;
        let this = &*self;
        let parts = par::map_indexed(x.n(), |i| {
            let xs = x.sample(i);
            let g = gy.sample(i);
            let cols: Cow<[f64]> = if this.pointwise() {
                Cow::Borrowed(xs)
            } else {
                Cow::Owned(this.im2col(xs, h, w))
            };
            let mut dw = vec![0.0; cout * ckk];
            gemm(cout, hw, ckk, g, false, &cols, true, 0.0, &mut dw);
            let db: Vec<f64> = (0..cout).map(|co| g[co * hw..(co + 1) * hw].iter().sum()).collect();
            let gx = need_input_grad.then(|| {
                let mut dcols = vec![0.0; ckk * hw];
                gemm(ckk, cout, hw, &this.weight.value, true, g, false, 0.0, &mut dcols);
                if this.pointwise() {
                    dcols
                } else {
                    this.col2im(&dcols, h, w)
                }
            });
            (dw, db, gx)
        });
        let mut gx_all = need_input_grad.then(|| Tensor::zeros(x.shape));
        for (i, (dw, db, gx)) in parts.into_iter().enumerate() {
            reduce_into(&mut self.weight, std::iter::once(dw));
            reduce_into(&mut self.bias, std::iter::once(db));
            if let (Some(all), Some(gx)) = (gx_all.as_mut(), gx) {
                all.sample_mut(i).copy_from_slice(&gx);
            }
        }
        gx_all
    }
}

impl ParamSet for Conv2d {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Per-channel 3×3 convolution, stride 1, zero padding 1.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthwiseConv3x3 {
    pub weight: Param,
    pub bias: Param,
    pub channels: usize,
}

impl DepthwiseConv3x3 {
    /// Centered delta kernels plus `N(0, jitter²)` noise, zero bias.
    pub fn near_identity(name: &str, channels: usize, jitter: f64, rng: &mut Rng) -> Self {
        let normal = Normal::new(0.0, jitter.max(0.0)).expect("finite");
        let mut w = vec![0.0; channels * 9];
        for c in 0..channels {
            for t in 0..9 {
                w[c * 9 + t] = if jitter > 0.0 { normal.sample(rng) } else { 0.0 };
            }
            w[c * 9 + 4] += 1.0;
        }
        Self {
            weight: Param::new(format!("{name}.weight"), vec![channels, 1, 3, 3], w),
            bias: Param::zeros(format!("{name}.bias"), vec![channels]),
            channels,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c(), self.channels);
        let (h, w) = (x.h(), x.w());
        let mut out = Tensor::zeros(x.shape);
        par::for_each_chunk_mut(&mut out.data, h * w, |plane_idx, y| {
            let c = plane_idx % self.channels;
            let src = &x.data[plane_idx * h * w..(plane_idx + 1) * h * w];
            let k = &self.weight.value[c * 9..c * 9 + 9];
            let b = self.bias.value[c];
            for oy in 0..h {
                for ox in 0..w {
                    let mut acc = b;
                    for ky in 0..3 {
                        let iy = oy as isize + ky as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = ox as isize + kx as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                acc += k[ky * 3 + kx] * src[iy as usize * w + ix as usize];
                            }
                        }
                    }
                    y[oy * w + ox] = acc;
                }
            }
        });
        out
    }

    pub fn backward(&mut self, x: &Tensor, gy: &Tensor) -> Tensor {
        let (h, w) = (x.h(), x.w());
        let channels = self.channels;
        let weights = &self.weight.value;
        let planes = x.n() * channels;
        let parts = par::map_indexed(planes, |plane_idx| {
            let c = plane_idx % channels;
            let src = &x.data[plane_idx * h * w..(plane_idx + 1) * h * w];
            let g = &gy.data[plane_idx * h * w..(plane_idx + 1) * h * w];
            let k = &weights[c * 9..c * 9 + 9];
            let mut dk = [0.0; 9];
            let mut gx = vec![0.0; h * w];
            for oy in 0..h {
                for ox in 0..w {
                    let go = g[oy * w + ox];
                    if go == 0.0 {
                        continue;
                    }
                    for ky in 0..3 {
                        let iy = oy as isize + ky as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = ox as isize + kx as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                let idx = iy as usize * w + ix as usize;
                                dk[ky * 3 + kx] += go * src[idx];
                                gx[idx] += go * k[ky * 3 + kx];
                            }
                        }
                    }
                }
            }
            let db: f64 = g.iter().sum();
            (dk, db, gx)
        });
        let mut gx_all = Tensor::zeros(x.shape);
        for (plane_idx, (dk, db, gx)) in parts.into_iter().enumerate() {
            let c = plane_idx % channels;
            for t in 0..9 {
                self.weight.grad[c * 9 + t] += dk[t];
            }
            self.bias.grad[c] += db;
            gx_all.data[plane_idx * h * w..(plane_idx + 1) * h * w].copy_from_slice(&gx);
        }
        gx_all
    }
}

impl ParamSet for DepthwiseConv3x3 {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Parametric ReLU with a learnable negative slope per channel. A slope of
/// one makes it the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct PRelu {
    pub slope: Param,
}

impl PRelu {
    pub fn new(name: &str, channels: usize, slope: f64) -> Self {
        Self {
            slope: Param::new(format!("{name}.slope"), vec![channels], vec![slope; channels]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let hw = x.h() * x.w();
        let c = x.c();
        let mut out = x.clone();
        for (i, v) in out.data.iter_mut().enumerate() {
            if *v <= 0.0 {
                *v *= self.slope.value[(i / hw) % c];
            }
        }
        out
    }

    pub fn backward(&mut self, x: &Tensor, gy: &Tensor) -> Tensor {
        let hw = x.h() * x.w();
        let c = x.c();
        let mut gx = gy.clone();
        for (i, (g, &xv)) in gx.data.iter_mut().zip(&x.data).enumerate() {
            if xv <= 0.0 {
                let ch = (i / hw) % c;
                self.slope.grad[ch] += xv * *g;
                *g *= self.slope.value[ch];
            }
        }
        gx
    }
}

impl ParamSet for PRelu {
    fn params(&self) -> Vec<&Param> {
        vec![&self.slope]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.slope]
    }
}

pub struct Relu;

impl Relu {
    pub fn forward(x: &Tensor) -> Tensor {
        let mut y = x.clone();
        y.data.iter_mut().for_each(|v| *v = v.max(0.0));
        y
    }

    /// Gradient through ReLU given its output.
    pub fn backward(y: &Tensor, gy: &Tensor) -> Tensor {
        let mut gx = gy.clone();
        for (g, &v) in gx.data.iter_mut().zip(&y.data) {
            if v <= 0.0 {
                *g = 0.0;
            }
        }
        gx
    }
}

/// Per-sample normalization over `C×H×W` with a per-channel affine map.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    pub eps: f64,
}

pub struct LayerNormCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), vec![channels], vec![1.0; channels]),
            beta: Param::zeros(format!("{name}.beta"), vec![channels]),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, LayerNormCache) {
        let hw = x.h() * x.w();
        let len = x.sample_len();
        let mut xhat = x.clone();
        let mut inv_std = Vec::with_capacity(x.n());
        for i in 0..x.n() {
            let s = xhat.sample_mut(i);
            let mean = s.iter().sum::<f64>() / len as f64;
            let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len as f64;
            let is = 1.0 / (var + self.eps).sqrt();
            s.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        let mut y = xhat.clone();
        for (j, v) in y.data.iter_mut().enumerate() {
            let c = (j / hw) % x.c();
            *v = *v * self.gamma.value[c] + self.beta.value[c];
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &LayerNormCache, gy: &Tensor) -> Tensor {
        let hw = gy.h() * gy.w();
        let len = gy.sample_len();
        let mut gx = Tensor::zeros(gy.shape);
        for i in 0..gy.n() {
            let xh = cache.xhat.sample(i);
            let g = gy.sample(i);
            let mut dxhat = vec![0.0; len];
            for j in 0..len {
                let ch = j / hw;
                self.gamma.grad[ch] += g[j] * xh[j];
                self.beta.grad[ch] += g[j];
                dxhat[j] = g[j] * self.gamma.value[ch];
            }
            let mean_d = dxhat.iter().sum::<f64>() / len as f64;
            let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / len as f64;
            let out = gx.sample_mut(i);
            for j in 0..len {
                out[j] = cache.inv_std[i] * (dxhat[j] - mean_d - xh[j] * mean_dx);
            }
        }
        gx
    }
}

impl ParamSet for LayerNorm {
    fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// 2×2 max pooling, stride 2.
pub struct MaxPool2;

impl MaxPool2 {
    pub fn forward(x: &Tensor) -> (Tensor, Vec<u32>) {
        let (h, w) = (x.h(), x.w());
        let (ho, wo) = (h / 2, w / 2);
        let planes = x.n() * x.c();
        let mut y = Tensor::zeros([x.n(), x.c(), ho, wo]);
        let mut arg = vec![0u32; planes * ho * wo];
        for p in 0..planes {
            let src = &x.data[p * h * w..(p + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut bi = 0;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let idx = (2 * oy + dy) * w + 2 * ox + dx;
                        if src[idx] > best {
                            best = src[idx];
                            bi = idx;
                        }
                    }
                    y.data[p * ho * wo + oy * wo + ox] = best;
                    arg[p * ho * wo + oy * wo + ox] = bi as u32;
                }
            }
        }
        (y, arg)
    }

    pub fn backward(input_shape: [usize; 4], arg: &[u32], gy: &Tensor) -> Tensor {
        let mut gx = Tensor::zeros(input_shape);
        let hw_in = input_shape[2] * input_shape[3];
        let hw_out = gy.h() * gy.w();
        for (j, &g) in gy.data.iter().enumerate() {
            let p = j / hw_out;
            gx.data[p * hw_in + arg[j] as usize] += g;
        }
        gx
    }
}

/// Nearest-neighbor 2× upsampling.
pub struct Upsample2;

impl Upsample2 {
    pub fn forward(x: &Tensor) -> Tensor {
        let (h, w) = (x.h(), x.w());
        let mut y = Tensor::zeros([x.n(), x.c(), 2 * h, 2 * w]);
        for p in 0..x.n() * x.c() {
            for oy in 0..2 * h {
                for ox in 0..2 * w {
                    y.data[p * 4 * h * w + oy * 2 * w + ox] = x.data[p * h * w + (oy / 2) * w + ox / 2];
                }
            }
        }
        y
    }

    pub fn backward(gy: &Tensor) -> Tensor {
        let (h, w) = (gy.h() / 2, gy.w() / 2);
        let mut gx = Tensor::zeros([gy.n(), gy.c(), h, w]);
        for p in 0..gy.n() * gy.c() {
            for oy in 0..2 * h {
                for ox in 0..2 * w {
                    gx.data[p * h * w + (oy / 2) * w + ox / 2] += gy.data[p * 4 * h * w + oy * 2 * w + ox];
                }
            }
        }
        gx
    }
}

/// Concatenate along channels (same N, H, W).
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!((a.n(), a.h(), a.w()), (b.n(), b.h(), b.w()));
    let mut out = Tensor::zeros([a.n(), a.c() + b.c(), a.h(), a.w()]);
    for i in 0..a.n() {
        let s = out.sample_mut(i);
        s[..a.sample_len()].copy_from_slice(a.sample(i));
        s[a.sample_len()..].copy_from_slice(b.sample(i));
    }
    out
}

/// Inverse of [`concat_channels`]: first `ca` channels, then the rest.
pub fn split_channels(x: &Tensor, ca: usize) -> (Tensor, Tensor) {
    let hw = x.h() * x.w();
    let mut a = Tensor::zeros([x.n(), ca, x.h(), x.w()]);
    let mut b = Tensor::zeros([x.n(), x.c() - ca, x.h(), x.w()]);
    for i in 0..x.n() {
        let s = x.sample(i);
        a.sample_mut(i).copy_from_slice(&s[..ca * hw]);
        b.sample_mut(i).copy_from_slice(&s[ca * hw..]);
    }
    (a, b)
}

pub struct GlobalAvgPool;

impl GlobalAvgPool {
    pub fn forward(x: &Tensor) -> Tensor {
        let hw = x.h() * x.w();
        let data = x
            .data
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        Tensor {
            shape: [x.n(), x.c(), 1, 1],
            data,
        }
    }

    pub fn backward(input_shape: [usize; 4], gy: &Tensor) -> Tensor {
        let hw = input_shape[2] * input_shape[3];
        let mut gx = Tensor::zeros(input_shape);
        for (p, chunk) in gx.data.chunks_mut(hw).enumerate() {
            chunk.fill(gy.data[p] / hw as f64);
        }
        gx
    }
}

/// Fully-connected layer on `N×in×1×1` tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn zeros(name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Param::zeros(format!("{name}.weight"), vec![fan_out, fan_in]),
            bias: Param::zeros(format!("{name}.bias"), vec![fan_out]),
            fan_in,
            fan_out,
        }
    }

    pub fn new(name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let mut l = Self::zeros(name, fan_in, fan_out);
        l.weight.value = he_normal(fan_in, fan_in * fan_out, rng);
        l
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.sample_len(), self.fan_in);
        let n = x.n();
        let mut y = Tensor::zeros([n, self.fan_out, 1, 1]);
        for i in 0..n {
            y.sample_mut(i).copy_from_slice(&self.bias.value);
        }
        gemm(n, self.fan_in, self.fan_out, &x.data, false, &self.weight.value, true, 1.0, &mut y.data);
        y
    }

    pub fn backward(&mut self, x: &Tensor, gy: &Tensor) -> Tensor {
        let n = x.n();
        let mut dw = vec![0.0; self.fan_out * self.fan_in];
        gemm(self.fan_out, n, self.fan_in, &gy.data, true, &x.data, false, 0.0, &mut dw);
        self.weight.accumulate(&dw);
        for i in 0..n {
            self.bias.accumulate(gy.sample(i));
        }
        let mut gx = Tensor::zeros(x.shape);
        gemm(n, self.fan_out, self.fan_in, &gy.data, false, &self.weight.value, false, 0.0, &mut gx.data);
        gx
    }
}

impl ParamSet for Linear {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}
