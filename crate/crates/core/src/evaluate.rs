//! Robustness evaluation over a grid of corruptions.

use crate::corruption::{apply_with, CorruptionAction, CorruptionKind, CorruptionTable};
use crate::dataset::ImageSample;
use crate::detector::{images_to_tensor, Detector};
use crate::error::{Error, Result};
use crate::imaging::{BinaryMask, GrayImage};
use crate::metrics::{MetricAccumulator, RobustnessRecord, TargetMatchConfig};
use crate::par;
use crate::rng::{self, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessReport {
    /// Clean row first, then one row per grid action in grid order.
    pub records: Vec<RobustnessRecord>,
    /// Severity-averaged row per kind present, then the grid average.
    pub aggregates: Vec<RobustnessRecord>,
}

impl RobustnessReport {
    pub fn clean(&self) -> &RobustnessRecord {
        &self.records[0]
    }

    pub fn corrupted(&self) -> &[RobustnessRecord] {
        &self.records[1..]
    }

    /// Mean corrupted IOU over the grid; `None` for a clean-only report.
    pub fn mean_corrupted_iou(&self) -> Option<f64> {
        let c = self.corrupted();
        (!c.is_empty()).then(|| c.iter().map(|r| r.iou_cor).sum::<f64>() / c.len() as f64)
    }

    pub fn find(&self, action: CorruptionAction) -> Option<&RobustnessRecord> {
        self.corrupted()
            .iter()
            .find(|r| r.kind == Some(action.kind) && r.severity == Some(action.severity))
    }
}

fn average(label: String, kind: Option<CorruptionKind>, rows: &[&RobustnessRecord], iou_clean: f64) -> RobustnessRecord {
    let n = rows.len() as f64;
    let mean = |f: fn(&RobustnessRecord) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
    RobustnessRecord::new(label, kind, None, iou_clean, mean(|r| r.iou_cor), mean(|r| r.pd), mean(|r| r.fa))
}

/// Dataset-level IOU/Pd/Fa on clean data and on every grid action. Each
/// corrupted image uses a seed derived from `(seed, sample, action)`, so the
/// report does not depend on worker count.
pub fn evaluate_robustness(
    detector: &Detector,
    samples: &[ImageSample],
    table: &CorruptionTable,
    grid: &[CorruptionAction],
    match_cfg: &TargetMatchConfig,
    seed: u64,
) -> Result<RobustnessReport> {
    if samples.is_empty() {
        return Err(Error::Dataset("evaluation set is empty".into()));
    }
    match_cfg.validate()?;
    let per_sample = par::map_indexed(samples.len(), |i| -> Result<Vec<MetricAccumulator>> {
        let s = &samples[i];
        let mut images = vec![s.image.clone()];
        for a in grid {
            images.push(apply_with(table, &s.image, *a, rng::derive2(seed, Stream::Eval, i as u64, a.index() as u64))?);
        }
        let refs: Vec<&GrayImage> = images.iter().collect();
        let prob = detector.forward(&images_to_tensor(&refs)?)?;
        let (h, w) = s.image.dims();
        (0..images.len())
            .map(|j| {
                let pred = BinaryMask::threshold(h, w, prob.sample(j), match_cfg.binarize_threshold);
                let mut acc = MetricAccumulator::default();
                acc.add(&pred, &s.mask, match_cfg)?;
                Ok(acc)
            })
            .collect()
    });
    let mut totals = vec![MetricAccumulator::default(); grid.len() + 1];
    for part in per_sample {
        for (t, p) in totals.iter_mut().zip(part?) {
            t.merge(&p);
        }
    }
    let clean_iou = totals[0].iou();
    let mut records = vec![RobustnessRecord::new(
        "clean",
        None,
        None,
        clean_iou,
        clean_iou,
        totals[0].pd(),
        totals[0].fa(),
    )];
    for (a, t) in grid.iter().zip(&totals[1..]) {
        records.push(RobustnessRecord::new(a.label(), Some(a.kind), Some(a.severity), clean_iou, t.iou(), t.pd(), t.fa()));
    }
    let mut aggregates = Vec::new();
    for kind in CorruptionKind::ALL {
        let rows: Vec<&RobustnessRecord> = records[1..].iter().filter(|r| r.kind == Some(kind)).collect();
        if !rows.is_empty() {
            aggregates.push(average(format!("{}:mean", kind.name()), Some(kind), &rows, clean_iou));
        }
    }
    if !grid.is_empty() {
        let rows: Vec<&RobustnessRecord> = records[1..].iter().collect();
        aggregates.push(average("mean".into(), None, &rows, clean_iou));
    }
    Ok(RobustnessReport { records, aggregates })
}
