//! CSV and Markdown renderings of robustness reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corruption::{CorruptionKind, Severity};
use crate::error::{Error, Result};
use crate::evaluate::RobustnessReport;
use crate::metrics::{rce, RobustnessRecord};

/// Column order of the Markdown tables; impulse noise is appended as an
/// extra column.
pub const TABLE_KINDS: [CorruptionKind; 9] = [
    CorruptionKind::GaussianNoise,
    CorruptionKind::ShotNoise,
    CorruptionKind::DefocusBlur,
    CorruptionKind::MotionBlur,
    CorruptionKind::GaussianBlur,
    CorruptionKind::Brightness,
    CorruptionKind::Contrast,
    CorruptionKind::Pixelate,
    CorruptionKind::JpegCompression,
];
pub const EXTRA_KINDS: [CorruptionKind; 1] = [CorruptionKind::ImpulseNoise];

/// One CSV line. IOU and Pd are fractions, RCE is a percentage, Fa is raw
/// and scaled by 10⁶.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub dataset: String,
    /// Corruption kind name, or `clean`.
    pub kind: String,
    /// Level, or `mean` on aggregate rows, empty on the clean row.
    pub severity: String,
    pub iou_clean: f64,
    pub iou_cor: f64,
    pub rce: Option<f64>,
    pub pd: f64,
    pub fa: f64,
    pub fa_e6: f64,
    pub seed: u64,
}

impl CsvRow {
    fn from_record(r: &RobustnessRecord, dataset: &str, seed: u64) -> Self {
        let kind = r.kind.map_or("clean".to_string(), |k| k.name().to_string());
        let severity = match (r.kind, r.severity) {
            (_, Some(s)) => s.level().to_string(),
            (Some(_), None) => "mean".into(),
            (None, None) if r.label == "clean" => String::new(),
            (None, None) => "mean".into(),
        };
        let kind = if r.kind.is_none() && r.label != "clean" { "all".into() } else { kind };
        Self {
            dataset: dataset.into(),
            kind,
            severity,
            iou_clean: r.iou_clean,
            iou_cor: r.iou_cor,
            rce: r.rce,
            pd: r.pd,
            fa: r.fa,
            fa_e6: r.fa * 1e6,
            seed,
        }
    }

    pub fn corruption_kind(&self) -> Option<CorruptionKind> {
        self.kind.parse().ok()
    }

    pub fn severity_level(&self) -> Option<Severity> {
        self.severity.parse::<u8>().ok().and_then(|l| Severity::new(l).ok())
    }
}

fn to_csv(rows: &[CsvRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::InvalidInput(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidInput(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Clean row followed by one row per grid cell.
pub fn records_csv(report: &RobustnessReport, dataset: &str, seed: u64) -> Result<String> {
    let rows: Vec<CsvRow> = report.records.iter().map(|r| CsvRow::from_record(r, dataset, seed)).collect();
    to_csv(&rows)
}

/// Severity-averaged and grid-averaged rows.
pub fn aggregates_csv(report: &RobustnessReport, dataset: &str, seed: u64) -> Result<String> {
    let rows: Vec<CsvRow> = report.aggregates.iter().map(|r| CsvRow::from_record(r, dataset, seed)).collect();
    to_csv(&rows)
}

pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(|e| Error::InvalidInput(format!("csv: {e}"))))
        .collect()
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

fn opt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |x| format!("{x:.2}"))
}

/// Per-kind mean corrupted IOU over the severities present, with its RCE.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub name: String,
    pub iou_clean: f64,
    pub per_kind: BTreeMap<CorruptionKind, f64>,
}

impl RunSummary {
    pub fn from_rows(name: &str, rows: &[CsvRow]) -> Result<Self> {
        let clean = rows
            .iter()
            .find(|r| r.kind == "clean")
            .ok_or_else(|| Error::InvalidInput(format!("{name}: no clean row")))?;
        let mut sums: BTreeMap<CorruptionKind, (f64, usize)> = BTreeMap::new();
        for r in rows {
            if let (Some(k), Some(_)) = (r.corruption_kind(), r.severity_level()) {
                let e = sums.entry(k).or_default();
                e.0 += r.iou_cor;
                e.1 += 1;
            }
        }
        Ok(Self {
            name: name.into(),
            iou_clean: clean.iou_clean,
            per_kind: sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
        })
    }

    pub fn average(&self) -> Option<f64> {
        (!self.per_kind.is_empty()).then(|| self.per_kind.values().sum::<f64>() / self.per_kind.len() as f64)
    }
}

fn kind_columns(runs: &[RunSummary]) -> Vec<(CorruptionKind, bool)> {
    TABLE_KINDS
        .iter()
        .map(|&k| (k, false))
        .chain(EXTRA_KINDS.iter().map(|&k| (k, true)))
        .filter(|(k, _)| runs.iter().any(|r| r.per_kind.contains_key(k)))
        .collect()
}

/// One row per run; kinds as columns with IOU and RCE sub-columns.
pub fn robustness_markdown(runs: &[RunSummary]) -> String {
    let cols = kind_columns(runs);
    let mut s = String::from("| Method | Clean IOU |");
    let mut rule = String::from("|---|---|");
    for (k, extra) in &cols {
        let mark = if *extra { " (extra)" } else { "" };
        let _ = write!(s, " {}{mark} IOU | RCE |", k.title());
        rule.push_str("---|---|");
    }
    s.push_str(" Average IOU | RCE |\n");
    rule.push_str("---|---|\n");
    s.push_str(&rule);
    for run in runs {
        let _ = write!(s, "| {} | {} |", run.name, pct(run.iou_clean));
        for (k, _) in &cols {
            match run.per_kind.get(k) {
                Some(&v) => {
                    let _ = write!(s, " {} | {} |", pct(v), opt(rce(run.iou_clean, v)));
                }
                None => s.push_str(" - | - |"),
            }
        }
        match run.average() {
            Some(a) => {
                let _ = writeln!(s, " {} | {} |", pct(a), opt(rce(run.iou_clean, a)));
            }
            None => s.push_str(" - | - |\n"),
        }
    }
    if cols.iter().any(|(_, e)| *e) {
        s.push_str("\nColumns marked (extra) are corruption kinds outside the nine standard table columns; the average covers every column shown.\n");
    }
    s
}

/// `IOU | Pd | Fa (×10⁻⁶)` for the clean row, IOU and Pd in percent.
pub fn clean_markdown(name: &str, clean: &RobustnessRecord) -> String {
    format!(
        "| Method | IOU | Pd | Fa (x1e-6) |\n|---|---|---|---|\n| {name} | {} | {} | {:.2} |\n",
        pct(clean.iou_clean),
        pct(clean.pd),
        clean.fa * 1e6
    )
}
