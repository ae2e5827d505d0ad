//! Real-input 2-D DFT over the last two axes with half-spectrum storage, its
//! inverse, and the adjoints needed for backpropagation.
//!
//! For an `H×W` plane the spectrum is `H×(W/2+1)`. The inverse follows the
//! usual convention: the imaginary parts of the zero and Nyquist columns are
//! ignored after the column transform, so for an arbitrary half spectrum `Y`
//!
//! `irfft2(Y)[h,w] = 1/(HW) Σ_{a,b} c_b Re(Y[a,b] e^{iθ})`,
//!
//! with `c_b = 1` on the zero/Nyquist columns and `2` elsewhere. Both
//! adjoints follow from that closed form.

use std::cell::RefCell;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::Tensor;
use crate::par;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(len)
        } else {
            p.plan_fft_forward(len)
        }
    })
}

pub fn half_width(w: usize) -> usize {
    w / 2 + 1
}

/// Column weight `c_b` of the half spectrum.
fn column_weight(b: usize, w: usize) -> f64 {
    if b == 0 || (w % 2 == 0 && b == w / 2) {
        1.0
    } else {
        2.0
    }
}

/// Real and imaginary half-spectrum planes of an `N×C×H×W` tensor, each
/// `N×C×H×(W/2+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyPair {
    pub real: Tensor,
    pub imag: Tensor,
    /// Spatial width of the source, needed to invert odd widths.
    pub width: usize,
}

impl FrequencyPair {
    pub fn zeros(shape: [usize; 4], width: usize) -> Self {
        Self {
            real: Tensor::zeros(shape),
            imag: Tensor::zeros(shape),
            width,
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.real.shape
    }

    pub fn is_finite(&self) -> bool {
        self.real.is_finite() && self.imag.is_finite()
    }

    pub fn max_abs_diff(&self, other: &FrequencyPair) -> f64 {
        self.real
            .max_abs_diff(&other.real)
            .max(self.imag.max_abs_diff(&other.imag))
    }
}

fn rfft2_plane(x: &[f64], h: usize, w: usize, re: &mut [f64], im: &mut [f64]) {
    let wh = half_width(w);
    let row_fft = plan(w, false);
    let col_fft = plan(h, false);
    let mut spec = vec![Complex64::new(0.0, 0.0); h * wh];
    let mut row = vec![Complex64::new(0.0, 0.0); w];
    for y in 0..h {
        for (c, v) in row.iter_mut().zip(&x[y * w..(y + 1) * w]) {
            *c = Complex64::new(*v, 0.0);
        }
        row_fft.process(&mut row);
        spec[y * wh..(y + 1) * wh].copy_from_slice(&row[..wh]);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for b in 0..wh {
        for a in 0..h {
            col[a] = spec[a * wh + b];
        }
        col_fft.process(&mut col);
        for a in 0..h {
            re[a * wh + b] = col[a].re;
            im[a * wh + b] = col[a].im;
        }
    }
}

fn irfft2_plane(re: &[f64], im: &[f64], h: usize, w: usize, out: &mut [f64]) {
    let wh = half_width(w);
    let row_ifft = plan(w, true);
    let col_ifft = plan(h, true);
    let mut spec = vec![Complex64::new(0.0, 0.0); h * wh];
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for b in 0..wh {
        for a in 0..h {
            col[a] = Complex64::new(re[a * wh + b], im[a * wh + b]);
        }
        col_ifft.process(&mut col);
        for a in 0..h {
            spec[a * wh + b] = col[a];
        }
    }
    let scale = 1.0 / (h * w) as f64;
    let mut row = vec![Complex64::new(0.0, 0.0); w];
    for y in 0..h {
        let z = &spec[y * wh..(y + 1) * wh];
        row[0] = Complex64::new(z[0].re, 0.0);
        for k in 1..wh {
            if w % 2 == 0 && k == w / 2 {
                row[k] = Complex64::new(z[k].re, 0.0);
            } else {
                row[k] = z[k];
                row[w - k] = z[k].conj();
            }
        }
        row_ifft.process(&mut row);
        for (o, c) in out[y * w..(y + 1) * w].iter_mut().zip(&row) {
            *o = c.re * scale;
        }
    }
}

/// Forward transform of every `H×W` plane.
pub fn rfft2(x: &Tensor) -> FrequencyPair {
    let (h, w) = (x.h(), x.w());
    let wh = half_width(w);
    let shape = [x.n(), x.c(), h, wh];
    let planes = par::map_indexed(x.n() * x.c(), |p| {
        let mut re = vec![0.0; h * wh];
        let mut im = vec![0.0; h * wh];
        rfft2_plane(&x.data[p * h * w..(p + 1) * h * w], h, w, &mut re, &mut im);
        (re, im)
    });
    let mut out = FrequencyPair::zeros(shape, w);
    for (p, (re, im)) in planes.into_iter().enumerate() {
        out.real.data[p * h * wh..(p + 1) * h * wh].copy_from_slice(&re);
        out.imag.data[p * h * wh..(p + 1) * h * wh].copy_from_slice(&im);
    }
    out
}

/// Inverse transform back to `N×C×H×W`.
pub fn irfft2(pair: &FrequencyPair) -> Tensor {
    let [n, c, h, wh] = pair.shape();
    let w = pair.width;
    debug_assert_eq!(wh, half_width(w));
    let mut out = Tensor::zeros([n, c, h, w]);
    par::for_each_chunk_mut(&mut out.data, h * w, |p, dst| {
        irfft2_plane(
            &pair.real.data[p * h * wh..(p + 1) * h * wh],
            &pair.imag.data[p * h * wh..(p + 1) * h * wh],
            h,
            w,
            dst,
        );
    });
    out
}

/// Adjoint of [`rfft2`]: maps a gradient on the half spectrum to the
/// gradient on the spatial input, `gx = HW · irfft2(G / c_b)`.
pub fn rfft2_backward(grad: &FrequencyPair) -> Tensor {
    let [_, _, h, wh] = grad.shape();
    let w = grad.width;
    let mut scaled = grad.clone();
    let hw = (h * w) as f64;
    for (j, (re, im)) in scaled
        .real
        .data
        .iter_mut()
        .zip(scaled.imag.data.iter_mut())
        .enumerate()
    {
        let f = hw / column_weight(j % wh, w);
        *re *= f;
        *im *= f;
    }
    irfft2(&scaled)
}

/// Adjoint of [`irfft2`]: `gY = c_b / (HW) · rfft2(gy)`.
pub fn irfft2_backward(gy: &Tensor) -> FrequencyPair {
    let (h, w) = (gy.h(), gy.w());
    let wh = half_width(w);
    let mut g = rfft2(gy);
    let hw = (h * w) as f64;
    for (j, (re, im)) in g.real.data.iter_mut().zip(g.imag.data.iter_mut()).enumerate() {
        let f = column_weight(j % wh, w) / hw;
        *re *= f;
        *im *= f;
    }
    g
}
