//! Benchmark metrics: average overlap, accuracy over successful
//! pairs, robustness (failure ratio), center distance in
//! millimetres, success curves, and their AUC, plus report emission
//! as JSON, CSV, and an SVG success plot.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{center_distance, iou, BoundingBox};
use crate::pipeline::TrackResult;
use crate::sampling::LesionType;

/// Number of thresholds in the success curve (0.00 to 1.00 in 0.01
/// steps).
pub const CURVE_POINTS: usize = 101;

/// Scored outcome of one tracked pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairOutcome {
    pub id: String,
    pub lesion_type: LesionType,
    /// Overlap with the ground truth, in the full-image frame.
    pub iou: f64,
    /// Distance between predicted and true box centers.
    pub center_l2_mm: f64,
}

impl PairOutcome {
    pub fn validate(&self) -> Result<()> {
        if !self.iou.is_finite() || !(0.0..=1.0).contains(&self.iou) {
            return Err(Error::OutOfRange {
                what: "pair outcome IoU",
                range: "[0, 1]",
                value: self.iou,
            });
        }
        if !self.center_l2_mm.is_finite() || self.center_l2_mm < 0.0 {
            return Err(Error::OutOfRange {
                what: "pair outcome center distance",
                range: "[0, inf)",
                value: self.center_l2_mm,
            });
        }
        Ok(())
    }
}

/// Scalar metrics over one group of outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    /// Mean IoU over all pairs.
    pub ao: f64,
    /// Mean IoU over successful pairs (0 when every pair failed).
    pub accuracy: f64,
    /// Failure ratio; a failure is an IoU of exactly 0.
    pub robustness: f64,
    pub mean_l2_mm: f64,
    /// Trapezoidal area under the success curve.
    pub auc: f64,
    pub pairs: usize,
}

/// Full benchmark report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall: MetricsSummary,
    /// Keyed by lesion type name; only types that occur appear.
    pub per_type: BTreeMap<String, MetricsSummary>,
    /// Overall success curve: `[threshold, rate]` rows.
    pub curve: Vec<(f64, f64)>,
}

/// Score one tracked pair against its ground-truth box.
pub fn score_pair(
    id: &str,
    lesion_type: LesionType,
    pred: &TrackResult,
    gt: &BoundingBox,
    spacing_mm: f64,
) -> Result<PairOutcome> {
    pred.validate()?;
    let outcome = PairOutcome {
        id: id.to_string(),
        lesion_type,
        iou: iou(&pred.bbox, gt)?,
        center_l2_mm: center_distance(&pred.bbox, gt, spacing_mm)?,
    };
    outcome.validate()?;
    Ok(outcome)
}

/// Success rate at each threshold i/100. The rate at 0 counts
/// strictly positive overlaps, so `1 - success(0)` is exactly the
/// failure ratio; every later point counts `iou >= t`.
fn success_curve(ious: &[f64]) -> Vec<(f64, f64)> {
    let n = ious.len() as f64;
    (0..CURVE_POINTS)
        .map(|i| {
            let t = i as f64 / 100.0;
            let hits = if i == 0 {
                ious.iter().filter(|&&v| v > 0.0).count()
            } else {
                ious.iter().filter(|&&v| v >= t).count()
            };
            (t, hits as f64 / n)
        })
        .collect()
}

/// Trapezoidal integral of a success curve over [0, 1].
pub fn curve_auc(curve: &[(f64, f64)]) -> f64 {
    curve
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

fn summarize(outcomes: &[&PairOutcome]) -> (MetricsSummary, Vec<(f64, f64)>) {
    let n = outcomes.len();
    let ious: Vec<f64> = outcomes.iter().map(|o| o.iou).collect();
    let failures = ious.iter().filter(|&&v| v == 0.0).count();
    let successes = n - failures;
    let sum: f64 = ious.iter().sum();
    let curve = success_curve(&ious);
    let accuracy = if successes == 0 {
        0.0
    } else {
        sum / successes as f64
    };
    let robustness = failures as f64 / n as f64;
    let summary = MetricsSummary {
        // Mathematically sum / n; written as the product so the
        // accuracy/robustness decomposition is exact even in floats.
        ao: accuracy * (1.0 - robustness),
        accuracy,
        robustness,
        mean_l2_mm: outcomes.iter().map(|o| o.center_l2_mm).sum::<f64>() / n as f64,
        auc: curve_auc(&curve),
        pairs: n,
    };
    (summary, curve)
}

/// Aggregate pair outcomes into the benchmark report, overall and
/// per lesion type.
pub fn aggregate(outcomes: &[PairOutcome]) -> Result<MetricsReport> {
    if outcomes.is_empty() {
        return Err(Error::EmptyInput("no pair outcomes to aggregate"));
    }
    for o in outcomes {
        o.validate()?;
    }
    let all: Vec<&PairOutcome> = outcomes.iter().collect();
    let (overall, curve) = summarize(&all);
    let mut per_type = BTreeMap::new();
    for ty in [LesionType::Mass, LesionType::Calcification] {
        let group: Vec<&PairOutcome> = outcomes.iter().filter(|o| o.lesion_type == ty).collect();
        if group.is_empty() {
            continue;
        }
        let name = match ty {
            LesionType::Mass => "mass",
            LesionType::Calcification => "calcification",
        };
        per_type.insert(name.to_string(), summarize(&group).0);
    }
    Ok(MetricsReport {
        overall,
        per_type,
        curve,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Write a report as pretty-printed JSON.
pub fn write_metrics_json(path: &Path, report: &MetricsReport) -> Result<()> {
    let text = serde_json::to_string_pretty(report).map_err(|e| Error::Schema {
        context: "metrics report".into(),
        message: e.to_string(),
    })?;
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

/// Read a report back from JSON.
pub fn read_metrics_json(path: &Path) -> Result<MetricsReport> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| Error::Schema {
        context: format!("metrics report {}", path.display()),
        message: e.to_string(),
    })
}

/// Write the success curve as `threshold,rate` CSV (header plus one
/// row per threshold).
pub fn write_success_csv(path: &Path, curve: &[(f64, f64)]) -> Result<()> {
    let mut text = String::from("threshold,rate\n");
    for (t, r) in curve {
        let _ = writeln!(text, "{t:.2},{r}");
    }
    std::fs::write(path, text).map_err(io_err(path))
}

/// One labelled curve in a success plot.
#[derive(Debug, Clone)]
pub struct SuccessSeries {
    pub label: String,
    pub curve: Vec<(f64, f64)>,
    pub auc: f64,
}

const SVG_COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

/// Render success curves as an SVG plot: unit axes, one polyline per
/// series, and a legend carrying each AUC.
pub fn write_success_svg(path: &Path, series: &[SuccessSeries]) -> Result<()> {
    if series.is_empty() {
        return Err(Error::EmptyInput("no series to plot"));
    }
    let (w, h, m) = (480.0, 360.0, 48.0);
    let (pw, ph) = (w - 2.0 * m, h - 2.0 * m);
    let x = |t: f64| m + t * pw;
    let y = |r: f64| m + (1.0 - r) * ph;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {w} {h}\" \
         font-family=\"sans-serif\" font-size=\"11\">"
    );
    let _ = writeln!(svg, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    // Axes with 0.2-step ticks and grid lines.
    for k in 0..=5 {
        let v = k as f64 / 5.0;
        let _ = writeln!(
            svg,
            "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"#ddd\"/>",
            x(v),
            y(0.0),
            x(v),
            y(1.0)
        );
        let _ = writeln!(
            svg,
            "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"#ddd\"/>",
            x(0.0),
            y(v),
            x(1.0),
            y(v)
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{v:.1}</text>",
            x(v),
            y(0.0) + 16.0
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{v:.1}</text>",
            x(0.0) - 6.0,
            y(v) + 4.0
        );
    }
    let _ = writeln!(
        svg,
        "<rect x=\"{m}\" y=\"{m}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"black\"/>"
    );
    let _ = writeln!(
        svg,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">IoU threshold</text>",
        x(0.5),
        h - 8.0
    );
    let _ = writeln!(
        svg,
        "<text x=\"14\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {:.1})\">\
         Success rate</text>",
        y(0.5),
        y(0.5)
    );
    for (i, s) in series.iter().enumerate() {
        let color = SVG_COLORS[i % SVG_COLORS.len()];
        let points: Vec<String> = s
            .curve
            .iter()
            .map(|(t, r)| format!("{:.2},{:.2}", x(*t), y(*r)))
            .collect();
        let _ = writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            points.join(" ")
        );
        let ly = m + 14.0 + 16.0 * i as f64;
        let _ = writeln!(
            svg,
            "<line x1=\"{:.1}\" y1=\"{ly}\" x2=\"{:.1}\" y2=\"{ly}\" stroke=\"{color}\" \
             stroke-width=\"1.5\"/>",
            x(0.02),
            x(0.08)
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\">{} (AUC {:.3})</text>",
            x(0.09),
            ly + 4.0,
            s.label,
            s.auc
        );
    }
    let _ = writeln!(svg, "</svg>");
    std::fs::write(path, svg).map_err(io_err(path))
}

/// Write the metrics JSON, the success-curve CSV, and the SVG plot
/// into `out_dir`; returns the written paths.
pub fn emit_report(report: &MetricsReport, label: &str, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let json = out_dir.join("metrics.json");
    let csv = out_dir.join("success_curve.csv");
    let svg = out_dir.join("success_plot.svg");
    write_metrics_json(&json, report)?;
    write_success_csv(&csv, &report.curve)?;
    write_success_svg(
        &svg,
        &[SuccessSeries {
            label: label.to_string(),
            curve: report.curve.clone(),
            auc: report.overall.auc,
        }],
    )?;
    Ok(vec![json, csv, svg])
}
