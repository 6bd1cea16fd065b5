//! Single-object evaluation: per-image TP/FP/FN at an IOU threshold,
//! accuracy/precision/recall/F1 curves, and objectness-vs-IOU reports.
//!
//! Only the top-scoring detection of an image is judged. True negatives do
//! not exist in this protocol (every image holds exactly one object).

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geom::{BBox, Detection};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Outcome {
    Tp,
    Fp,
    Fn,
}

/// How a detection's IOU is compared against the threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum IouRule {
    /// `iou > threshold`
    #[default]
    Strict,
    /// `iou >= threshold`
    Inclusive,
}

impl IouRule {
    pub fn passes(self, iou: f64, threshold: f64) -> bool {
        match self {
            IouRule::Strict => iou > threshold,
            IouRule::Inclusive => iou >= threshold,
        }
    }
}

/// Highest-scoring detection; the earliest one wins ties.
pub fn top_detection(detections: &[Detection]) -> Option<&Detection> {
    detections
        .iter()
        .reduce(|best, d| if d.score > best.score { d } else { best })
}

/// Judges one image: no detection is a miss, otherwise the top detection is
/// a hit when its IOU with `gt` passes `threshold` under `rule`.
pub fn judge(gt: &BBox, detections: &[Detection], threshold: f64, rule: IouRule) -> Outcome {
    match top_detection(detections) {
        None => Outcome::Fn,
        Some(d) if rule.passes(d.bbox.iou(gt), threshold) => Outcome::Tp,
        Some(_) => Outcome::Fp,
    }
}

/// What the evaluator keeps of one image: its top detection and that
/// detection's IOU with the ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub gt: BBox,
    pub top: Option<Detection>,
}

impl ImageRecord {
    pub fn new(id: impl Into<String>, gt: BBox, detections: &[Detection]) -> Self {
        ImageRecord {
            id: id.into(),
            gt,
            top: top_detection(detections).copied(),
        }
    }

    /// IOU of the top detection (0 without one).
    pub fn iou(&self) -> f64 {
        self.top.map_or(0.0, |d| d.bbox.iou(&self.gt))
    }

    /// Score of the top detection (0 without one).
    pub fn score(&self) -> f64 {
        self.top.map_or(0.0, |d| d.score)
    }

    pub fn outcome(&self, threshold: f64, rule: IouRule) -> Outcome {
        match self.top {
            None => Outcome::Fn,
            Some(_) if rule.passes(self.iou(), threshold) => Outcome::Tp,
            Some(_) => Outcome::Fp,
        }
    }
}

/// F1 score, undefined when `precision + recall` is zero.
pub fn f1(precision: f64, recall: f64) -> Option<f64> {
    let s = precision + recall;
    (s > 0.0).then(|| 2.0 * precision * recall / s)
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurveRow {
    pub iou_threshold: f64,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl CurveRow {
    fn from_counts(iou_threshold: f64, tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        CurveRow {
            iou_threshold,
            accuracy: ratio(tp, tp + fp + fn_),
            precision,
            recall,
            f1: precision.zip(recall).and_then(|(p, r)| f1(p, r)),
            tp,
            fp,
            fn_,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricCurve {
    pub rows: Vec<CurveRow>,
}

pub const CURVE_HEADER: &str = "iou_threshold,accuracy,precision,recall,f1,tp,fp,fn";

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

impl MetricCurve {
    pub fn row_at(&self, threshold: f64) -> Option<&CurveRow> {
        self.rows.iter().find(|r| (r.iou_threshold - threshold).abs() < 1e-9)
    }

    /// CSV with fixed 4-decimal cells; undefined cells read `n/a`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CURVE_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:.4},{},{},{},{},{},{},{}",
                r.iou_threshold,
                cell(r.accuracy),
                cell(r.precision),
                cell(r.recall),
                cell(r.f1),
                r.tp,
                r.fp,
                r.fn_
            );
        }
        s
    }

    /// Line chart of the four metrics against the IOU threshold.
    pub fn to_svg(&self, title: &str) -> String {
        let series: [(&str, &str, fn(&CurveRow) -> Option<f64>); 4] = [
            ("accuracy", "#1f77b4", |r| r.accuracy),
            ("precision", "#ff7f0e", |r| r.precision),
            ("recall", "#2ca02c", |r| r.recall),
            ("f1", "#d62728", |r| r.f1),
        ];
        svg_chart(title, "IOU threshold", &self.rows, |r| r.iou_threshold, &series)
    }
}

/// Evaluates every record at every threshold.
pub fn curve(records: &[ImageRecord], thresholds: &[f64], rule: IouRule) -> Result<MetricCurve> {
    if thresholds.is_empty() {
        return Err(Error::InvalidArgument("no IOU thresholds given".into()));
    }
    if records.is_empty() {
        return Err(Error::InvalidArgument("no images to evaluate".into()));
    }
    let rows = thresholds
        .iter()
        .map(|&t| {
            let (mut tp, mut fp, mut fn_) = (0, 0, 0);
            for r in records {
                match r.outcome(t, rule) {
                    Outcome::Tp => tp += 1,
                    Outcome::Fp => fp += 1,
                    Outcome::Fn => fn_ += 1,
                }
            }
            CurveRow::from_counts(t, tp, fp, fn_)
        })
        .collect();
    Ok(MetricCurve { rows })
}

/// `from, from + step, ...` with `floor((to - from) / step) + 1` entries.
pub fn threshold_grid(from: f64, to: f64, step: f64) -> Result<Vec<f64>> {
    if !(from.is_finite() && to.is_finite() && step.is_finite()) || step <= 0.0 || to < from {
        return Err(Error::InvalidArgument(format!(
            "bad threshold grid from={from} to={to} step={step}"
        )));
    }
    // tolerate representation error such as (0.9 - 0.1) / 0.05 = 15.999...
    let n = ((to - from) / step + 1e-9).floor() as usize + 1;
    Ok((0..n).map(|i| from + i as f64 * step).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreIouRow {
    pub threshold: f64,
    pub accuracy_by_score: f64,
    pub accuracy_by_iou: f64,
}

/// Accuracy when "correct" means a confident top detection versus a
/// well-placed one, side by side, with the per-image pairs behind them.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectnessReport {
    pub rows: Vec<ScoreIouRow>,
    /// `(image id, top score, top IOU)`
    pub pairs: Vec<(String, f64, f64)>,
}

pub const OBJECTNESS_HEADER: &str = "threshold,accuracy_by_score,accuracy_by_iou";

impl ObjectnessReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(OBJECTNESS_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(s, "{:.4},{:.4},{:.4}", r.threshold, r.accuracy_by_score, r.accuracy_by_iou);
        }
        s
    }

    pub fn pairs_csv(&self) -> String {
        let mut s = String::from("image,score,iou\n");
        for (id, score, iou) in &self.pairs {
            let _ = writeln!(s, "{id},{score:.4},{iou:.4}");
        }
        s
    }
}

/// For each threshold `t`: the fraction of images whose top score is `>= t`
/// and the fraction whose top IOU is `>= t`.
pub fn objectness_vs_iou_report(records: &[ImageRecord], thresholds: &[f64]) -> Result<ObjectnessReport> {
    if records.is_empty() || thresholds.is_empty() {
        return Err(Error::InvalidArgument("report needs images and thresholds".into()));
    }
    let n = records.len() as f64;
    let pairs: Vec<(String, f64, f64)> = records.iter().map(|r| (r.id.clone(), r.score(), r.iou())).collect();
    let rows = thresholds
        .iter()
        .map(|&t| ScoreIouRow {
            threshold: t,
            accuracy_by_score: pairs.iter().filter(|p| p.1 >= t).count() as f64 / n,
            accuracy_by_iou: pairs.iter().filter(|p| p.2 >= t).count() as f64 / n,
        })
        .collect();
    Ok(ObjectnessReport { rows, pairs })
}

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 420.0;
const MARGIN: (f64, f64, f64, f64) = (60.0, 130.0, 40.0, 50.0); // left, right, top, bottom

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Minimal dependency-free SVG line chart with y fixed to `[0, 1]`.
/// Undefined points break a series into separate segments.
fn svg_chart<R>(
    title: &str,
    x_label: &str,
    rows: &[R],
    x_of: impl Fn(&R) -> f64,
    series: &[(&str, &str, fn(&R) -> Option<f64>)],
) -> String {
    let (ml, mr, mt, mb) = MARGIN;
    let (pw, ph) = (SVG_W - ml - mr, SVG_H - mt - mb);
    let xs: Vec<f64> = rows.iter().map(&x_of).collect();
    let (mut x0, mut x1) = xs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    if !(x1 > x0) {
        x0 = if x0.is_finite() { x0 - 0.5 } else { 0.0 };
        x1 = x0 + 1.0;
    }
    let px = |x: f64| ml + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| mt + (1.0 - y.clamp(0.0, 1.0)) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_W}" height="{SVG_H}" viewBox="0 0 {SVG_W} {SVG_H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        ml + pw / 2.0,
        escape(title)
    );
    for i in 0..=5 {
        let y = i as f64 / 5.0;
        let _ = writeln!(
            s,
            r##"<line x1="{ml}" y1="{0:.1}" x2="{1:.1}" y2="{0:.1}" stroke="#ddd"/><text x="{2:.1}" y="{3:.1}" text-anchor="end">{y:.1}</text>"##,
            py(y),
            ml + pw,
            ml - 6.0,
            py(y) + 4.0
        );
    }
    for i in 0..=4 {
        let x = x0 + (x1 - x0) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{x:.2}</text>"#,
            px(x),
            mt + ph + 18.0
        );
    }
    let _ = writeln!(
        s,
        r#"<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        ml + pw / 2.0,
        SVG_H - 12.0,
        escape(x_label)
    );
    for (k, (name, color, get)) in series.iter().enumerate() {
        let mut segment: Vec<String> = Vec::new();
        let flush = |seg: &mut Vec<String>, s: &mut String| {
            if seg.len() > 1 {
                let _ = writeln!(
                    s,
                    r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
                    seg.join(" ")
                );
            } else if let Some(p) = seg.first() {
                let (cx, cy) = p.split_once(',').unwrap_or(("0", "0"));
                let _ = writeln!(s, r#"<circle cx="{cx}" cy="{cy}" r="2.5" fill="{color}"/>"#);
            }
            seg.clear();
        };
        for (r, &x) in rows.iter().zip(&xs) {
            match get(r) {
                Some(y) if y.is_finite() => segment.push(format!("{:.1},{:.1}", px(x), py(y))),
                _ => flush(&mut segment, &mut s),
            }
        }
        flush(&mut segment, &mut s);
        let ly = mt + 16.0 + 20.0 * k as f64;
        let lx = ml + pw + 14.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            lx + 22.0,
            lx + 28.0,
            ly + 4.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}
