//! Soft-IoU training loss and the evaluation metrics: pixel IOU, target-level
//! Pd/Fa with centroid matching, and relative corruption error.

use serde::{Deserialize, Serialize};

use crate::corruption::{CorruptionKind, Severity};
use crate::error::{Error, Result};
use crate::imaging::{BinaryMask, ProbabilityMap};

/// Smoothing term of the soft-IoU loss.
pub const SOFT_IOU_EPS: f64 = 1.0;

fn same_shape(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{}x{}", a.0, a.1), format!("{}x{}", b.0, b.1)));
    }
    Ok(())
}

/// `1 - (Σpy + ε) / (Σp + Σy - Σpy + ε)` and its gradient with respect to
/// every prediction value.
pub fn soft_iou_loss_grad(pred: &[f64], mask: &[f64]) -> (f64, Vec<f64>) {
    debug_assert_eq!(pred.len(), mask.len());
    let (mut inter, mut sp, mut sy) = (0.0, 0.0, 0.0);
    for (&p, &y) in pred.iter().zip(mask) {
        inter += p * y;
        sp += p;
        sy += y;
    }
    let num = inter + SOFT_IOU_EPS;
    let den = sp + sy - inter + SOFT_IOU_EPS;
    let loss = 1.0 - num / den;
    let den2 = den * den;
    let grad = mask
        .iter()
        .map(|&y| -(y * den - num * (1.0 - y)) / den2)
        .collect();
    (loss, grad)
}

pub fn soft_iou_loss(pred: &ProbabilityMap, mask: &BinaryMask) -> Result<f64> {
    same_shape((pred.height, pred.width), mask.dims())?;
    if pred.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("prediction".into()));
    }
    Ok(soft_iou_loss_grad(&pred.values, &mask.as_f64()).0)
}

/// Pixel IOU; 1 when both masks are empty.
pub fn iou(pred: &BinaryMask, mask: &BinaryMask) -> Result<f64> {
    same_shape(pred.dims(), mask.dims())?;
    let (inter, union) = overlap(pred, mask);
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

fn overlap(pred: &BinaryMask, mask: &BinaryMask) -> (usize, usize) {
    let mut inter = 0;
    let mut union = 0;
    for (&a, &b) in pred.values().iter().zip(mask.values()) {
        inter += usize::from(a & b);
        union += usize::from(a | b);
    }
    (inter, union)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetMatchConfig {
    pub binarize_threshold: f64,
    /// Maximum centroid distance (pixels) for a detection.
    pub match_distance: f64,
    pub connectivity: u8,
}

impl Default for TargetMatchConfig {
    fn default() -> Self {
        Self {
            binarize_threshold: 0.5,
            match_distance: 3.0,
            connectivity: 8,
        }
    }
}

impl TargetMatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.binarize_threshold > 0.0 && self.binarize_threshold < 1.0) {
            return Err(Error::Config("binarize_threshold must lie in (0,1)".into()));
        }
        if !(self.match_distance > 0.0) {
            return Err(Error::Config("match_distance must be > 0".into()));
        }
        if self.connectivity != 8 && self.connectivity != 4 {
            return Err(Error::Config("connectivity must be 4 or 8".into()));
        }
        Ok(())
    }
}

/// One connected foreground region.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub area: usize,
    pub centroid: (f64, f64),
}

/// Connected components in raster-scan discovery order.
pub fn connected_components(mask: &BinaryMask, connectivity: u8) -> Vec<Component> {
    let (h, w) = mask.dims();
    let mut seen = vec![false; h * w];
    let mut comps = Vec::new();
    let mut stack = Vec::new();
    let offsets: &[(isize, isize)] = if connectivity == 4 {
        &[(-1, 0), (1, 0), (0, -1), (0, 1)]
    } else {
        &[(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]
    };
    for start in 0..h * w {
        if seen[start] || mask.values()[start] == 0 {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut area, mut sr, mut sc) = (0usize, 0.0, 0.0);
        while let Some(p) = stack.pop() {
            let (r, c) = (p / w, p % w);
            area += 1;
            sr += r as f64;
            sc += c as f64;
            for &(dr, dc) in offsets {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                    continue;
                }
                let q = nr as usize * w + nc as usize;
                if !seen[q] && mask.values()[q] != 0 {
                    seen[q] = true;
                    stack.push(q);
                }
            }
        }
        comps.push(Component {
            area,
            centroid: (sr / area as f64, sc / area as f64),
        });
    }
    comps
}

/// Raw target-level counts for one image.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetCounts {
    pub targets: usize,
    pub detected: usize,
    pub false_pixels: usize,
    pub pixels: usize,
}

impl TargetCounts {
    pub fn pd(&self) -> f64 {
        if self.targets == 0 {
            1.0
        } else {
            self.detected as f64 / self.targets as f64
        }
    }

    pub fn fa(&self) -> f64 {
        if self.pixels == 0 {
            0.0
        } else {
            self.false_pixels as f64 / self.pixels as f64
        }
    }
}

/// Greedy one-to-one centroid matching, nearest pairs first.
pub fn target_counts(pred: &BinaryMask, mask: &BinaryMask, cfg: &TargetMatchConfig) -> Result<TargetCounts> {
    same_shape(pred.dims(), mask.dims())?;
    let gt = connected_components(mask, cfg.connectivity);
    let pc = connected_components(pred, cfg.connectivity);
    let mut pairs = Vec::new();
    for (i, g) in gt.iter().enumerate() {
        for (j, p) in pc.iter().enumerate() {
            let d = ((g.centroid.0 - p.centroid.0).powi(2) + (g.centroid.1 - p.centroid.1).powi(2)).sqrt();
            if d <= cfg.match_distance {
                pairs.push((d, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut gt_used = vec![false; gt.len()];
    let mut pred_used = vec![false; pc.len()];
    let mut detected = 0;
    for (_, i, j) in pairs {
        if !gt_used[i] && !pred_used[j] {
            gt_used[i] = true;
            pred_used[j] = true;
            detected += 1;
        }
    }
    let false_pixels = pc
        .iter()
        .zip(&pred_used)
        .filter(|(_, &used)| !used)
        .map(|(c, _)| c.area)
        .sum();
    Ok(TargetCounts {
        targets: gt.len(),
        detected,
        false_pixels,
        pixels: mask.values().len(),
    })
}

/// `(pd, fa)`; pd is 1 when the mask has no targets, fa is the fraction of
/// all pixels covered by unmatched predicted components.
pub fn pd_fa(pred: &BinaryMask, mask: &BinaryMask, cfg: &TargetMatchConfig) -> Result<(f64, f64)> {
    let c = target_counts(pred, mask, cfg)?;
    Ok((c.pd(), c.fa()))
}

/// Relative corruption error in percent; `None` when `iou_clean <= 0`.
pub fn rce(iou_clean: f64, iou_cor: f64) -> Option<f64> {
    if iou_clean > 0.0 && iou_clean.is_finite() && iou_cor.is_finite() {
        Some(100.0 * (iou_clean - iou_cor) / iou_clean)
    } else {
        None
    }
}

/// Dataset-level accumulation. IOU is total intersection over total union,
/// Pd total detections over total targets, Fa total false pixels over total
/// pixels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricAccumulator {
    pub intersection: usize,
    pub union: usize,
    pub counts: TargetCounts,
}

impl MetricAccumulator {
    pub fn add(&mut self, pred: &BinaryMask, mask: &BinaryMask, cfg: &TargetMatchConfig) -> Result<()> {
        same_shape(pred.dims(), mask.dims())?;
        let (i, u) = overlap(pred, mask);
        let c = target_counts(pred, mask, cfg)?;
        self.intersection += i;
        self.union += u;
        self.counts.targets += c.targets;
        self.counts.detected += c.detected;
        self.counts.false_pixels += c.false_pixels;
        self.counts.pixels += c.pixels;
        Ok(())
    }

    pub fn merge(&mut self, other: &MetricAccumulator) {
        self.intersection += other.intersection;
        self.union += other.union;
        self.counts.targets += other.counts.targets;
        self.counts.detected += other.counts.detected;
        self.counts.false_pixels += other.counts.false_pixels;
        self.counts.pixels += other.counts.pixels;
    }

    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }

    pub fn pd(&self) -> f64 {
        self.counts.pd()
    }

    pub fn fa(&self) -> f64 {
        self.counts.fa()
    }
}

/// One evaluated grid cell. `kind`/`severity` are `None` on the clean row
/// and on aggregate rows (see `label`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRecord {
    pub label: String,
    pub kind: Option<CorruptionKind>,
    pub severity: Option<Severity>,
    pub iou_clean: f64,
    pub iou_cor: f64,
    pub rce: Option<f64>,
    pub pd: f64,
    pub fa: f64,
}

impl RobustnessRecord {
    pub fn new(
        label: impl Into<String>,
        kind: Option<CorruptionKind>,
        severity: Option<Severity>,
        iou_clean: f64,
        iou_cor: f64,
        pd: f64,
        fa: f64,
    ) -> Self {
        Self {
            label: label.into(),
            kind,
            severity,
            iou_clean,
            iou_cor,
            rce: rce(iou_clean, iou_cor),
            pd,
            fa,
        }
    }
}
