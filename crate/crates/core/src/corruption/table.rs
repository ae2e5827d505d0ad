use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CorruptionAction, CorruptionKind};
use crate::error::{Error, Result};

/// Severity parameters for every kind, indexed by `Severity::slot()`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptionTable {
    pub gaussian_noise_sigma: [f64; 3],
    pub shot_noise_photons: [f64; 3],
    pub impulse_noise_prob: [f64; 3],
    pub motion_blur_length: [usize; 3],
    pub defocus_blur_radius: [usize; 3],
    pub gaussian_blur_sigma: [f64; 3],
    pub brightness_offset: [f64; 3],
    pub contrast_factor: [f64; 3],
    pub pixelate_block: [usize; 3],
    pub jpeg_quality: [u8; 3],
}

impl Default for CorruptionTable {
    fn default() -> Self {
        Self {
            gaussian_noise_sigma: [0.04, 0.08, 0.12],
            shot_noise_photons: [60.0, 25.0, 12.0],
            impulse_noise_prob: [0.01, 0.03, 0.06],
            motion_blur_length: [5, 9, 15],
            defocus_blur_radius: [2, 4, 6],
            gaussian_blur_sigma: [1.0, 2.0, 3.0],
            brightness_offset: [0.1, 0.2, 0.3],
            contrast_factor: [0.75, 0.5, 0.3],
            pixelate_block: [2, 4, 6],
            jpeg_quality: [25, 15, 10],
        }
    }
}

fn nondecreasing<T: PartialOrd + Copy>(v: [T; 3]) -> bool {
    v[0] <= v[1] && v[1] <= v[2]
}

fn nonincreasing<T: PartialOrd + Copy>(v: [T; 3]) -> bool {
    v[0] >= v[1] && v[1] >= v[2]
}

impl CorruptionTable {
    /// Checks ranges and that distortion strength never decreases with level.
    /// Photon count, contrast factor and JPEG quality run the other way.
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("corruption table: {what}")));
        if !self.gaussian_noise_sigma.iter().all(|&s| s >= 0.0 && s.is_finite())
            || !nondecreasing(self.gaussian_noise_sigma)
        {
            return bad("gaussian_noise_sigma must be finite, >= 0 and non-decreasing");
        }
        if !self.shot_noise_photons.iter().all(|&p| p > 0.0 && p.is_finite())
            || !nonincreasing(self.shot_noise_photons)
        {
            return bad("shot_noise_photons must be > 0 and non-increasing");
        }
        if !self.impulse_noise_prob.iter().all(|&p| (0.0..=1.0).contains(&p))
            || !nondecreasing(self.impulse_noise_prob)
        {
            return bad("impulse_noise_prob must lie in [0,1] and be non-decreasing");
        }
        if !self.motion_blur_length.iter().all(|&l| l >= 1) || !nondecreasing(self.motion_blur_length)
        {
            return bad("motion_blur_length must be >= 1 and non-decreasing");
        }
        if !nondecreasing(self.defocus_blur_radius) {
            return bad("defocus_blur_radius must be non-decreasing");
        }
        if !self.gaussian_blur_sigma.iter().all(|&s| s > 0.0 && s.is_finite())
            || !nondecreasing(self.gaussian_blur_sigma)
        {
            return bad("gaussian_blur_sigma must be > 0 and non-decreasing");
        }
        if !self.brightness_offset.iter().all(|b| b.is_finite())
            || !nondecreasing(self.brightness_offset.map(f64::abs))
        {
            return bad("brightness_offset magnitude must be non-decreasing");
        }
        if !self.contrast_factor.iter().all(|&c| (0.0..=1.0).contains(&c))
            || !nonincreasing(self.contrast_factor)
        {
            return bad("contrast_factor must lie in [0,1] and be non-increasing");
        }
        if !self.pixelate_block.iter().all(|&b| b >= 1) || !nondecreasing(self.pixelate_block) {
            return bad("pixelate_block must be >= 1 and non-decreasing");
        }
        if !self.jpeg_quality.iter().all(|&q| (1..=100).contains(&q))
            || !nonincreasing(self.jpeg_quality)
        {
            return bad("jpeg_quality must lie in 1..=100 and be non-increasing");
        }
        Ok(())
    }

    /// Side length of the blur kernel an action uses, or `None` for
    /// non-blur kinds.
    pub fn kernel_size(&self, action: CorruptionAction) -> Option<usize> {
        let s = action.severity.slot();
        match action.kind {
            CorruptionKind::MotionBlur => Some(odd(self.motion_blur_length[s])),
            CorruptionKind::DefocusBlur => Some(2 * self.defocus_blur_radius[s] + 1),
            CorruptionKind::GaussianBlur => {
                Some(2 * super::kernels::gaussian_radius(self.gaussian_blur_sigma[s]) + 1)
            }
            _ => None,
        }
    }

    /// SHA-256 over the canonical JSON encoding, hex.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("table serializes");
        hex::encode(Sha256::digest(json))
    }
}

pub(crate) fn odd(n: usize) -> usize {
    if n % 2 == 0 {
        n + 1
    } else {
        n
    }
}
