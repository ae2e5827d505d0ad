//! Blur kernels and reflect-padded convolution.

use super::table::odd;

/// Square, normalized 2-D kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    pub size: usize,
    pub weights: Vec<f64>,
}

impl Kernel {
    fn normalized(size: usize, mut weights: Vec<f64>) -> Self {
        let s: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= s);
        Self { size, weights }
    }
}

pub(crate) fn gaussian_radius(sigma: f64) -> usize {
    (4.0 * sigma).ceil().max(1.0) as usize
}

/// Gaussian taps truncated at 4σ, normalized.
pub fn gaussian_kernel_1d(sigma: f64) -> Vec<f64> {
    let r = gaussian_radius(sigma) as i64;
    let w: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Flat disk of the given radius.
pub fn defocus_kernel(radius: usize) -> Kernel {
    let size = 2 * radius + 1;
    let r = radius as f64;
    let mut w = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let dy = y as f64 - r;
            let dx = x as f64 - r;
            if dx * dx + dy * dy <= r * r + 1e-9 {
                w[y * size + x] = 1.0;
            }
        }
    }
    Kernel::normalized(size, w)
}

/// Line of `length` pixels through the kernel center at `angle` radians,
/// rasterized by bilinear splatting of densely sampled points.
pub fn motion_kernel(length: usize, angle: f64) -> Kernel {
    let size = odd(length.max(1));
    let c = (size / 2) as f64;
    let half = (length.max(1) as f64 - 1.0) / 2.0;
    let mut w = vec![0.0; size * size];
    let samples = 8 * size + 1;
    let (sin, cos) = angle.sin_cos();
    for i in 0..samples {
        let t = if samples == 1 {
            0.0
        } else {
            -half + 2.0 * half * i as f64 / (samples - 1) as f64
        };
        let x = c + t * cos;
        let y = c - t * sin;
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
            for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                let (xi, yi) = (x0 + dx, y0 + dy);
                if xi >= 0.0 && yi >= 0.0 && (xi as usize) < size && (yi as usize) < size {
                    w[yi as usize * size + xi as usize] += wx * wy;
                }
            }
        }
    }
    Kernel::normalized(size, w)
}

/// Mirror index without repeating the edge sample (`dcb|abcd|cba`).
#[inline]
pub(crate) fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

pub(crate) fn convolve2d(pixels: &[f64], h: usize, w: usize, k: &Kernel) -> Vec<f64> {
    let r = (k.size / 2) as i64;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for ky in 0..k.size {
                let sy = reflect(y as i64 + ky as i64 - r, h);
                let row = &pixels[sy * w..(sy + 1) * w];
                let krow = &k.weights[ky * k.size..(ky + 1) * k.size];
                for (kx, &kw) in krow.iter().enumerate() {
                    if kw != 0.0 {
                        acc += kw * row[reflect(x as i64 + kx as i64 - r, w)];
                    }
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

pub(crate) fn convolve_separable(pixels: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as i64;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        let row = &pixels[y * w..(y + 1) * w];
        for x in 0..w {
            tmp[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * row[reflect(x as i64 + i as i64 - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * tmp[reflect(y as i64 + i as i64 - r, h) * w + x])
                .sum();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernels_normalize() {
        for k in [defocus_kernel(2), defocus_kernel(6), motion_kernel(9, 0.7), motion_kernel(15, 2.9)] {
            let s: f64 = k.weights.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(k.weights.iter().all(|&w| w >= 0.0));
        }
        let g = gaussian_kernel_1d(2.0);
        assert_eq!(g.len(), 17);
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn horizontal_motion_kernel_is_a_row() {
        let k = motion_kernel(5, 0.0);
        let mid = k.size / 2;
        for y in 0..k.size {
            for x in 0..k.size {
                if y != mid {
                    assert!(k.weights[y * k.size + x].abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<_> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(reflect(5, 1), 0);
    }

    #[test]
    fn constant_image_is_blur_fixed_point() {
        let img = vec![0.3; 20 * 20];
        let out = convolve2d(&img, 20, 20, &defocus_kernel(4));
        assert!(out.iter().all(|v| (v - 0.3).abs() < 1e-12));
        let out = convolve_separable(&img, 20, 20, &gaussian_kernel_1d(1.0));
        assert!(out.iter().all(|v| (v - 0.3).abs() < 1e-12));
    }
}
