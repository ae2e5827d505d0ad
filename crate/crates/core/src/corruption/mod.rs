//! Photometric and optical image corruptions: ten kinds at three severities.
//!
//! Every operator is a pure function of `(image, action, seed)`. Masks are
//! never touched; callers pair the corrupted image with the original mask.

mod kernels;
mod ops;
mod table;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::GrayImage;

pub use kernels::{defocus_kernel, gaussian_kernel_1d, motion_kernel, Kernel};
pub use ops::{apply, apply_with, distortion_magnitude, textured_fixture};
pub use table::CorruptionTable;

pub const NUM_KINDS: usize = 10;
pub const NUM_LEVELS: usize = 3;
pub const NUM_ACTIONS: usize = NUM_KINDS * NUM_LEVELS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    MotionBlur,
    DefocusBlur,
    GaussianBlur,
    Brightness,
    Contrast,
    Pixelate,
    JpegCompression,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionGroup {
    Noise,
    Blur,
    Isp,
}

impl CorruptionGroup {
    pub fn kinds(self) -> impl Iterator<Item = CorruptionKind> {
        CorruptionKind::ALL
            .into_iter()
            .filter(move |k| k.group() == self)
    }
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; NUM_KINDS] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::MotionBlur,
        CorruptionKind::DefocusBlur,
        CorruptionKind::GaussianBlur,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
        CorruptionKind::Pixelate,
        CorruptionKind::JpegCompression,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::MotionBlur => "motion_blur",
            CorruptionKind::DefocusBlur => "defocus_blur",
            CorruptionKind::GaussianBlur => "gaussian_blur",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Pixelate => "pixelate",
            CorruptionKind::JpegCompression => "jpeg_compression",
        }
    }

    /// Human-readable column title used in report tables.
    pub fn title(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "Gaussian Noise",
            CorruptionKind::ShotNoise => "Shot Noise",
            CorruptionKind::ImpulseNoise => "Impulse Noise",
            CorruptionKind::MotionBlur => "Motion Blur",
            CorruptionKind::DefocusBlur => "Defocus Blur",
            CorruptionKind::GaussianBlur => "Gaussian Blur",
            CorruptionKind::Brightness => "Brightness",
            CorruptionKind::Contrast => "Contrast",
            CorruptionKind::Pixelate => "Pixelate",
            CorruptionKind::JpegCompression => "JPEG Compression",
        }
    }

    pub fn group(self) -> CorruptionGroup {
        use CorruptionKind::*;
        match self {
            GaussianNoise | ShotNoise | ImpulseNoise => CorruptionGroup::Noise,
            MotionBlur | DefocusBlur | GaussianBlur => CorruptionGroup::Blur,
            Brightness | Contrast | Pixelate | JpegCompression => CorruptionGroup::Isp,
        }
    }

    pub fn is_stochastic(self) -> bool {
        use CorruptionKind::*;
        matches!(self, GaussianNoise | ShotNoise | ImpulseNoise | MotionBlur)
    }

    pub fn is_blur(self) -> bool {
        self.group() == CorruptionGroup::Blur
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let valid: Vec<_> = Self::ALL.iter().map(|k| k.name()).collect();
                Error::InvalidInput(format!(
                    "unknown corruption kind `{s}`; valid kinds: {}",
                    valid.join(", ")
                ))
            })
    }
}

/// Severity level in `1..=3`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Severity(u8);

impl Severity {
    pub const ALL: [Severity; NUM_LEVELS] = [Severity(1), Severity(2), Severity(3)];

    pub fn new(level: u8) -> Result<Self> {
        if (1..=NUM_LEVELS as u8).contains(&level) {
            Ok(Self(level))
        } else {
            Err(Error::InvalidInput(format!(
                "severity must be in 1..=3, got {level}"
            )))
        }
    }

    pub fn level(self) -> u8 {
        self.0
    }

    /// Zero-based position in parameter tables.
    pub fn slot(self) -> usize {
        usize::from(self.0 - 1)
    }
}

impl TryFrom<u8> for Severity {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        Severity::new(v)
    }
}

impl From<Severity> for u8 {
    fn from(s: Severity) -> u8 {
        s.0
    }
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One (kind, severity) cell of the 10×3 action grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CorruptionAction {
    pub kind: CorruptionKind,
    pub severity: Severity,
}

impl CorruptionAction {
    pub fn new(kind: CorruptionKind, severity: Severity) -> Self {
        Self { kind, severity }
    }

    /// Flat index `3 * kind + (level - 1)`.
    pub fn index(self) -> usize {
        NUM_LEVELS * self.kind.index() + self.severity.slot()
    }

    pub fn from_index(i: usize) -> Result<Self> {
        if i >= NUM_ACTIONS {
            return Err(Error::InvalidInput(format!(
                "action index {i} out of range 0..{NUM_ACTIONS}"
            )));
        }
        Ok(Self {
            kind: CorruptionKind::ALL[i / NUM_LEVELS],
            severity: Severity::ALL[i % NUM_LEVELS],
        })
    }

    pub fn all() -> impl Iterator<Item = CorruptionAction> {
        (0..NUM_ACTIONS).map(|i| Self::from_index(i).expect("in range"))
    }

    /// `"kind:level"`, the label written into checkpoints and logs.
    pub fn label(self) -> String {
        format!("{}:{}", self.kind.name(), self.severity.level())
    }
}

impl fmt::Display for CorruptionAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Index ↔ label layout of the action space, recorded in checkpoints.
pub fn action_layout() -> Vec<String> {
    CorruptionAction::all().map(CorruptionAction::label).collect()
}

pub(crate) fn check_image(image: &GrayImage) -> Result<()> {
    if !image.is_finite() {
        return Err(Error::NonFinite("input image".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_index_is_bijective() {
        let mut seen = [false; NUM_ACTIONS];
        for kind in CorruptionKind::ALL {
            for severity in Severity::ALL {
                let a = CorruptionAction::new(kind, severity);
                let i = a.index();
                assert_eq!(i, 3 * kind.index() + usize::from(severity.level()) - 1);
                assert!(!seen[i]);
                seen[i] = true;
                assert_eq!(CorruptionAction::from_index(i).unwrap(), a);
            }
        }
        assert!(CorruptionAction::from_index(30).is_err());
    }

    #[test]
    fn groups_partition_kinds() {
        let noise: Vec<_> = CorruptionGroup::Noise.kinds().collect();
        let blur: Vec<_> = CorruptionGroup::Blur.kinds().collect();
        let isp: Vec<_> = CorruptionGroup::Isp.kinds().collect();
        assert_eq!(noise.len(), 3);
        assert_eq!(blur.len(), 3);
        assert_eq!(isp.len(), 4);
        assert_eq!(noise.len() + blur.len() + isp.len(), NUM_KINDS);
    }

    #[test]
    fn parse_kind_lists_valid_names() {
        assert_eq!(
            "motion_blur".parse::<CorruptionKind>().unwrap(),
            CorruptionKind::MotionBlur
        );
        let err = "fog".parse::<CorruptionKind>().unwrap_err().to_string();
        for k in CorruptionKind::ALL {
            assert!(err.contains(k.name()), "{err}");
        }
    }

    #[test]
    fn severity_range() {
        assert!(Severity::new(0).is_err());
        assert!(Severity::new(4).is_err());
        assert_eq!(Severity::new(3).unwrap().slot(), 2);
    }
}
