use std::f64::consts::PI;

use image::codecs::jpeg::JpegEncoder;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, Poisson};

use super::kernels::{convolve2d, convolve_separable, defocus_kernel, gaussian_kernel_1d, motion_kernel};
use super::{check_image, CorruptionAction, CorruptionKind, CorruptionTable};
use crate::error::{Error, Result};
use crate::imaging::GrayImage;
use crate::rng;

/// Corrupt `image` with the default parameter table.
pub fn apply(image: &GrayImage, action: CorruptionAction, seed: u64) -> Result<GrayImage> {
    apply_with(&CorruptionTable::default(), image, action, seed)
}

pub fn apply_with(
    table: &CorruptionTable,
    image: &GrayImage,
    action: CorruptionAction,
    seed: u64,
) -> Result<GrayImage> {
    check_image(image)?;
    let (h, w) = image.dims();
    if let Some(k) = table.kernel_size(action) {
        if h < k || w < k {
            return Err(Error::ImageTooSmall {
                height: h,
                width: w,
                kernel: k,
                kind: action.kind.name(),
            });
        }
    }
    let s = action.severity.slot();
    let src = image.pixels();
    let mut rng = rng::rng(seed);

    let mut out: Vec<f64> = match action.kind {
        CorruptionKind::GaussianNoise => {
            let normal = Normal::new(0.0, table.gaussian_noise_sigma[s])
                .map_err(|e| Error::Config(e.to_string()))?;
            src.iter().map(|&v| v + normal.sample(&mut rng)).collect()
        }
        CorruptionKind::ShotNoise => {
            let photons = table.shot_noise_photons[s];
            src.iter()
                .map(|&v| {
                    let rate = v.max(0.0) * photons;
                    if rate <= 0.0 {
                        0.0
                    } else {
                        let p: f64 = Poisson::new(rate).expect("positive rate").sample(&mut rng);
                        p / photons
                    }
                })
                .collect()
        }
        CorruptionKind::ImpulseNoise => {
            let p = table.impulse_noise_prob[s];
            src.iter()
                .map(|&v| {
                    let hit = rng.gen::<f64>() < p;
                    let salt = rng.gen::<bool>();
                    match (hit, salt) {
                        (false, _) => v,
                        (true, true) => 1.0,
                        (true, false) => 0.0,
                    }
                })
                .collect()
        }
        CorruptionKind::MotionBlur => {
            let angle = rng.gen_range(0.0..PI);
            convolve2d(src, h, w, &motion_kernel(table.motion_blur_length[s], angle))
        }
        CorruptionKind::DefocusBlur => {
            convolve2d(src, h, w, &defocus_kernel(table.defocus_blur_radius[s]))
        }
        CorruptionKind::GaussianBlur => {
            convolve_separable(src, h, w, &gaussian_kernel_1d(table.gaussian_blur_sigma[s]))
        }
        CorruptionKind::Brightness => {
            let b = table.brightness_offset[s];
            src.iter().map(|&v| v + b).collect()
        }
        CorruptionKind::Contrast => {
            let c = table.contrast_factor[s];
            src.iter().map(|&v| (v - 0.5) * c + 0.5).collect()
        }
        CorruptionKind::Pixelate => pixelate(src, h, w, table.pixelate_block[s]),
        CorruptionKind::JpegCompression => jpeg_round_trip(image, table.jpeg_quality[s])?,
    };
    for v in &mut out {
        *v = v.clamp(0.0, 1.0);
    }
    GrayImage::new(h, w, out)
}

/// Replace each aligned `block`×`block` tile (partial at the borders) by its
/// mean: a box downsample followed by nearest-neighbor upsampling.
fn pixelate(src: &[f64], h: usize, w: usize, block: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for by in (0..h).step_by(block) {
        for bx in (0..w).step_by(block) {
            let (ye, xe) = ((by + block).min(h), (bx + block).min(w));
            let mut sum = 0.0;
            for y in by..ye {
                sum += src[y * w + bx..y * w + xe].iter().sum::<f64>();
            }
            let mean = sum / ((ye - by) * (xe - bx)) as f64;
            for y in by..ye {
                out[y * w + bx..y * w + xe].fill(mean);
            }
        }
    }
    out
}

fn jpeg_round_trip(image: &GrayImage, quality: u8) -> Result<Vec<f64>> {
    let (h, w) = image.dims();
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality).encode(
        &image.to_u8(),
        w as u32,
        h as u32,
        image::ExtendedColorType::L8,
    )?;
    let decoded = image::load_from_memory_with_format(&buf, image::ImageFormat::Jpeg)?.to_luma8();
    debug_assert_eq!(decoded.dimensions(), (w as u32, h as u32));
    Ok(decoded.into_raw().into_iter().map(|b| f64::from(b) / 255.0).collect())
}

/// Mean absolute pixel difference.
pub fn distortion_magnitude(clean: &GrayImage, corrupted: &GrayImage) -> Result<f64> {
    if clean.dims() != corrupted.dims() {
        return Err(Error::shape(
            format!("{:?}", clean.dims()),
            format!("{:?}", corrupted.dims()),
        ));
    }
    let n = clean.pixels().len() as f64;
    Ok(clean
        .pixels()
        .iter()
        .zip(corrupted.pixels())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n)
}

/// Deterministic textured test scene: smooth gradients, oriented gratings,
/// a checkerboard patch and a few bright spots, all inside `[0.15, 0.85]`.
pub fn textured_fixture(size: usize) -> GrayImage {
    let n = size as f64;
    GrayImage::from_fn(size, size, |r, c| {
        let (y, x) = (r as f64 / n, c as f64 / n);
        let mut v = 0.5
            + 0.12 * (2.0 * PI * (3.0 * x + 1.0 * y)).sin()
            + 0.08 * (2.0 * PI * (7.0 * y - 2.0 * x)).cos()
            + 0.06 * (x - 0.5);
        if (r / 4 + c / 4) % 2 == 0 && r < size / 2 && c >= size / 2 {
            v += 0.1;
        }
        for &(sy, sx) in &[(0.25, 0.25), (0.7, 0.6), (0.4, 0.8)] {
            let d2 = (y - sy).powi(2) + (x - sx).powi(2);
            v += 0.2 * (-d2 * n * n / 4.0).exp();
        }
        v.clamp(0.15, 0.85)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corruption::{Severity, NUM_ACTIONS};

    fn act(kind: CorruptionKind, level: u8) -> CorruptionAction {
        CorruptionAction::new(kind, Severity::new(level).unwrap())
    }

    #[test]
    fn contrast_fixes_mid_gray() {
        let img = GrayImage::filled(16, 16, 0.5);
        for l in 1..=3 {
            let out = apply(&img, act(CorruptionKind::Contrast, l), 3).unwrap();
            assert!(out.pixels().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn gaussian_noise_statistics() {
        let img = GrayImage::filled(64, 64, 0.5);
        let out = apply(&img, act(CorruptionKind::GaussianNoise, 1), 7).unwrap();
        let n = out.pixels().len() as f64;
        let mean = out.mean();
        let var = out.pixels().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((mean - 0.5).abs() <= 0.005, "mean {mean}");
        assert!((var.sqrt() - 0.04).abs() <= 0.005, "std {}", var.sqrt());
    }

    #[test]
    fn pixelate_is_block_constant() {
        let img = textured_fixture(64);
        let out = apply(&img, act(CorruptionKind::Pixelate, 2), 0).unwrap();
        for by in (0..64).step_by(4) {
            for bx in (0..64).step_by(4) {
                let v = out.get(by, bx);
                for y in by..by + 4 {
                    for x in bx..bx + 4 {
                        assert_eq!(out.get(y, x), v);
                    }
                }
            }
        }
    }

    #[test]
    fn distortion_examples() {
        let x = textured_fixture(8);
        assert_eq!(distortion_magnitude(&x, &x).unwrap(), 0.0);
        let z = GrayImage::filled(2, 2, 0.0);
        let o = GrayImage::filled(2, 2, 1.0);
        assert_eq!(distortion_magnitude(&z, &o).unwrap(), 1.0);
        assert!(distortion_magnitude(&z, &GrayImage::filled(3, 2, 0.0)).is_err());

        let clean = textured_fixture(64);
        let d1 = distortion_magnitude(&clean, &apply(&clean, act(CorruptionKind::GaussianBlur, 1), 5).unwrap()).unwrap();
        let d3 = distortion_magnitude(&clean, &apply(&clean, act(CorruptionKind::GaussianBlur, 3), 5).unwrap()).unwrap();
        assert!(d3 > d1, "{d3} <= {d1}");
    }

    #[test]
    fn rejects_non_finite_and_tiny_images() {
        let mut img = GrayImage::filled(32, 32, 0.5);
        img.pixels_mut()[3] = f64::NAN;
        assert!(matches!(
            apply(&img, act(CorruptionKind::Brightness, 1), 0),
            Err(Error::NonFinite(_))
        ));
        let small = GrayImage::filled(20, 20, 0.5);
        assert!(matches!(
            apply(&small, act(CorruptionKind::GaussianBlur, 3), 0),
            Err(Error::ImageTooSmall { kernel: 25, .. })
        ));
        // Non-blur kinds accept any size.
        assert!(apply(&GrayImage::filled(3, 5, 0.5), act(CorruptionKind::JpegCompression, 3), 0).is_ok());
    }

    #[test]
    fn every_action_preserves_shape_and_range() {
        let img = textured_fixture(40);
        for i in 0..NUM_ACTIONS {
            let a = CorruptionAction::from_index(i).unwrap();
            let out = apply(&img, a, 11).unwrap();
            assert_eq!(out.dims(), img.dims());
            assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)), "{a}");
        }
    }
}
