//! Minimal reverse-mode layer library for the two networks.
//!
//! Each layer exposes `forward` (pure, `&self`) and `backward`, which takes
//! the forward input (or a cache), accumulates parameter gradients into the
//! layer's [`Param`]s and returns the gradient with respect to the input.
//! Batched work is spread per sample through [`crate::par`], and every
//! cross-sample reduction is summed in sample order.

mod adam;
pub mod fft;
mod gemm;
mod layers;
mod param;
mod tensor;

pub use adam::Adam;
pub use layers::{
    concat_channels, split_channels, Conv2d, DepthwiseConv3x3, GlobalAvgPool, LayerNorm, LayerNormCache, Linear,
    MaxPool2, PRelu, Relu, Upsample2,
};
pub use param::{fingerprint, Param, ParamSet};
pub use tensor::Tensor;
