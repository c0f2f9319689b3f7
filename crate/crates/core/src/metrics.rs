//! Accuracy, recall, forward-pass statistics, and accuracy-vs-FP curve comparison.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::PixelRect;
use crate::ranking::FpReport;

/// One evaluated question, a line of an `.eval.jsonl` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub question_id: String,
    #[serde(default)]
    pub predicted: String,
    #[serde(default)]
    pub gt_answer: String,
    pub fp_total: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fp_breakdown: Option<FpReport>,
    #[serde(default)]
    pub proposed_pixel_rects: Vec<PixelRect>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_boxes: Option<Vec<PixelRect>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub accuracy: f64,
    pub fp: f64,
}

impl CurvePoint {
    pub const fn new(accuracy: f64, fp: f64) -> Self {
        Self { accuracy, fp }
    }
}

/// A labelled accuracy-vs-FP curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub label: String,
    pub points: Vec<CurvePoint>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapMode {
    /// Intersection over the ground-truth area.
    #[default]
    GtArea,
    Iou,
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no records")]
    Empty,
    #[error("no record carries ground-truth boxes")]
    NoGroundTruth,
    #[error("empty curve")]
    EmptyCurve,
    #[error(
        "invalid curve point (accuracy {accuracy}, fp {fp}); need accuracy in [0, 1] and fp > 0"
    )]
    InvalidPoint { accuracy: f64, fp: f64 },
    #[error("reference accuracy {0} lies below both curves")]
    Extrapolation(f64),
}

pub fn accuracy(records: &[EvalRecord]) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let hits = records
        .iter()
        .filter(|r| r.predicted == r.gt_answer)
        .count();
    Ok(hits as f64 / records.len() as f64)
}

/// Whether `rect` covers at least half of `gt` under `mode`. Exact integer test.
pub fn overlaps_half(rect: &PixelRect, gt: &PixelRect, mode: OverlapMode) -> bool {
    let inter = rect.intersection_area(gt);
    let denom = match mode {
        OverlapMode::GtArea => gt.area(),
        OverlapMode::Iou => rect.union_area(gt),
    };
    denom > 0 && 2 * inter >= denom
}

pub fn is_hit(proposed: &[PixelRect], gt_boxes: &[PixelRect], mode: OverlapMode) -> bool {
    proposed
        .iter()
        .any(|r| gt_boxes.iter().any(|g| overlaps_half(r, g, mode)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub recall: f64,
    pub evaluated: usize,
    pub skipped: usize,
}

/// Fraction of records with some proposal covering half of some GT box.
/// Records without GT boxes are skipped.
pub fn recall_at_half(
    records: &[EvalRecord],
    mode: OverlapMode,
) -> Result<RecallReport, MetricsError> {
    let mut hits = 0;
    let mut evaluated = 0;
    let mut skipped = 0;
    for r in records {
        match &r.gt_boxes {
            Some(gt) => {
                evaluated += 1;
                if is_hit(&r.proposed_pixel_rects, gt, mode) {
                    hits += 1;
                }
            }
            None => {
                log::warn!(
                    "record {} has no gt_boxes; skipped for recall",
                    r.question_id
                );
                skipped += 1;
            }
        }
    }
    if evaluated == 0 {
        return Err(if records.is_empty() {
            MetricsError::Empty
        } else {
            MetricsError::NoGroundTruth
        });
    }
    Ok(RecallReport {
        recall: f64::from(hits) / evaluated as f64,
        evaluated,
        skipped,
    })
}

pub fn mean_fp(records: &[EvalRecord]) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(records.iter().map(|r| r.fp_total as f64).sum::<f64>() / records.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub records: usize,
    pub accuracy: f64,
    pub mean_fp: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall_at_half: Option<RecallReport>,
    pub overlap_mode: OverlapMode,
}

pub fn summarize(records: &[EvalRecord], mode: OverlapMode) -> Result<MetricsReport, MetricsError> {
    Ok(MetricsReport {
        records: records.len(),
        accuracy: accuracy(records)?,
        mean_fp: mean_fp(records)?,
        recall_at_half: recall_at_half(records, mode).ok(),
        overlap_mode: mode,
    })
}

/// Aligned two-column text rendering of a report.
pub fn render_table(report: &MetricsReport) -> String {
    let mut rows = vec![
        ("records".to_string(), report.records.to_string()),
        ("accuracy".to_string(), format!("{:.4}", report.accuracy)),
        ("mean_fp".to_string(), format!("{:.4}", report.mean_fp)),
    ];
    if let Some(r) = report.recall_at_half {
        let mode = match report.overlap_mode {
            OverlapMode::GtArea => "gt_area",
            OverlapMode::Iou => "iou",
        };
        rows.push((format!("recall@0.5 ({mode})"), format!("{:.4}", r.recall)));
        rows.push(("recall_evaluated".into(), r.evaluated.to_string()));
        rows.push(("recall_skipped".into(), r.skipped.to_string()));
    }
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    rows.iter()
        .map(|(k, v)| format!("{k:<width$}  {v}\n"))
        .collect()
}

fn validate(curve: &[CurvePoint]) -> Result<(), MetricsError> {
    if curve.is_empty() {
        return Err(MetricsError::EmptyCurve);
    }
    for p in curve {
        if !(0.0..=1.0).contains(&p.accuracy) || !(p.fp.is_finite() && p.fp > 0.0) {
            return Err(MetricsError::InvalidPoint {
                accuracy: p.accuracy,
                fp: p.fp,
            });
        }
    }
    Ok(())
}

/// Sorts by FP and replaces each accuracy by the best seen at or below that FP.
pub fn upper_envelope(curve: &[CurvePoint]) -> Vec<CurvePoint> {
    let mut pts = curve.to_vec();
    pts.sort_by(|a, b| a.fp.total_cmp(&b.fp));
    let mut best = f64::NEG_INFINITY;
    for p in &mut pts {
        best = best.max(p.accuracy);
        p.accuracy = best;
    }
    pts
}

/// FP needed to reach `acc` on an envelope; `None` if `acc` is below its first point.
fn fp_at(envelope: &[CurvePoint], acc: f64) -> Option<f64> {
    let i = envelope.iter().position(|p| p.accuracy >= acc)?;
    let hi = envelope[i];
    if hi.accuracy == acc {
        return Some(hi.fp);
    }
    if i == 0 {
        return None;
    }
    let lo = envelope[i - 1];
    let t = (acc - lo.accuracy) / (hi.accuracy - lo.accuracy);
    Some(lo.fp + t * (hi.fp - lo.fp))
}

/// How many times fewer FPs `ours` needs than `reference` for the same accuracy.
///
/// Both curves are reduced to their upper envelopes. The common accuracy is
/// the smaller of the two best accuracies; each curve's FP there is read off
/// by linear interpolation. A curve that starts above the common accuracy is
/// charged its cheapest point.
pub fn efficiency_ratio(
    ours: &[CurvePoint],
    reference: &[CurvePoint],
) -> Result<f64, MetricsError> {
    validate(ours)?;
    validate(reference)?;
    let ours = upper_envelope(ours);
    let reference = upper_envelope(reference);
    let top = |c: &[CurvePoint]| c[c.len() - 1].accuracy;
    let acc = top(&ours).min(top(&reference));
    let (a, b) = (fp_at(&ours, acc), fp_at(&reference, acc));
    if a.is_none() && b.is_none() {
        return Err(MetricsError::Extrapolation(acc));
    }
    let fp_ours = a.unwrap_or(ours[0].fp);
    let fp_ref = b.unwrap_or(reference[0].fp);
    Ok(fp_ref / fp_ours)
}

fn svg_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

const PALETTE: [&str; 6] = [
    "#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
];

/// Accuracy-vs-FP chart, one polyline with markers per curve.
pub fn plot_svg(curves: &[Curve]) -> String {
    let (w, h) = (640.0, 420.0);
    let (left, right, top, bottom) = (60.0, 160.0, 20.0, 50.0);
    let pts = curves.iter().flat_map(|c| &c.points);
    let (mut fp_max, mut acc_min, mut acc_max) = (0.0f64, 1.0f64, 0.0f64);
    for p in pts {
        fp_max = fp_max.max(p.fp);
        acc_min = acc_min.min(p.accuracy);
        acc_max = acc_max.max(p.accuracy);
    }
    if fp_max <= 0.0 {
        fp_max = 1.0;
    }
    if acc_max <= acc_min {
        acc_min = (acc_min - 0.05).max(0.0);
        acc_max = (acc_max + 0.05).min(1.0);
    }
    let pw = w - left - right;
    let ph = h - top - bottom;
    let x = |fp: f64| left + fp / (fp_max * 1.05) * pw;
    let y = |acc: f64| top + ph - (acc - acc_min) / (acc_max - acc_min) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{left} {top} V{} H{}" fill="none" stroke="black"/>"#,
        top + ph,
        left + pw
    );
    for i in 0..=4 {
        let fp = fp_max * 1.05 * f64::from(i) / 4.0;
        let acc = acc_min + (acc_max - acc_min) * f64::from(i) / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{fp:.1}</text>"#,
            x(fp),
            top + ph + 16.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.1}</text>"#,
            left - 6.0,
            y(acc) + 4.0,
            acc * 100.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">forward passes</text>"#,
        left + pw / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.1}" transform="rotate(-90 14 {:.1})" text-anchor="middle">accuracy (%)</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );
    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut sorted = c.points.clone();
        sorted.sort_by(|a, b| a.fp.total_cmp(&b.fp));
        let path: Vec<String> = sorted
            .iter()
            .map(|p| format!("{:.1},{:.1}", x(p.fp), y(p.accuracy)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            path.join(" ")
        );
        for p in &sorted {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#,
                x(p.fp),
                y(p.accuracy)
            );
        }
        let ly = top + 16.0 * i as f64 + 8.0;
        let _ = writeln!(
            s,
            r#"<rect x="{:.1}" y="{:.1}" width="12" height="3" fill="{color}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            left + pw + 12.0,
            ly - 4.0,
            left + pw + 30.0,
            ly,
            svg_escape(&c.label)
        );
    }
    s.push_str("</svg>\n");
    s
}
