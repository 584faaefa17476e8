//! Static SVG plots and CSV tables summarizing a run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::metrics::MetricsReport;
use crate::promptgen::TaskKind;
use crate::scoring::MassCurve;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Fixed-precision number formatting so output bytes do not depend on float printing quirks.
fn num(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

struct Canvas {
    body: String,
    width: f64,
    height: f64,
}

impl Canvas {
    fn new(width: f64, height: f64) -> Self {
        Canvas { body: String::new(), width, height }
    }

    fn text(&mut self, x: f64, y: f64, size: u32, anchor: &str, fill: &str, s: &str) {
        let _ = writeln!(
            self.body,
            r#"<text x="{}" y="{}" font-size="{size}" text-anchor="{anchor}" fill="{fill}" font-family="sans-serif">{}</text>"#,
            num(x),
            num(y),
            esc(s)
        );
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str, width: f64, dash: bool) {
        let d = if dash { r#" stroke-dasharray="4 3""# } else { "" };
        let _ = writeln!(
            self.body,
            r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="{stroke}" stroke-width="{}"{d}/>"#,
            num(x1),
            num(y1),
            num(x2),
            num(y2),
            num(width)
        );
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str, opacity: f64) {
        let _ = writeln!(
            self.body,
            r#"<rect x="{}" y="{}" width="{}" height="{}" fill="{fill}" fill-opacity="{}"/>"#,
            num(x),
            num(y),
            num(w.max(0.0)),
            num(h.max(0.0)),
            num(opacity)
        );
    }

    fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            self.body,
            w = num(self.width),
            h = num(self.height)
        )
    }
}

/// Linear map from a data interval onto a pixel interval.
#[derive(Clone, Copy)]
struct Scale {
    d0: f64,
    d1: f64,
    p0: f64,
    p1: f64,
}

impl Scale {
    fn at(&self, v: f64) -> f64 {
        self.p0 + (v - self.d0) / (self.d1 - self.d0) * (self.p1 - self.p0)
    }
}

fn symmetric_extent(values: impl Iterator<Item = f64>, floor: f64) -> f64 {
    let m = values.fold(floor, |m, v| m.max(v.abs()));
    (m * 1.15).ceil()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Region {
    /// Accuracy up or unchanged, bias down or unchanged.
    Ideal,
    /// Accuracy down, bias up.
    Worst,
    /// Bias down at an accuracy cost.
    DebiasTradeoff,
    /// Accuracy up while bias rises.
    AccuracyTradeoff,
    /// On an axis.
    Boundary,
}

pub fn region(delta_accuracy: f64, delta_kl_pct: f64) -> Region {
    match (delta_accuracy.total_cmp(&0.0), delta_kl_pct.total_cmp(&0.0)) {
        (std::cmp::Ordering::Greater, std::cmp::Ordering::Less) => Region::Ideal,
        (std::cmp::Ordering::Less, std::cmp::Ordering::Greater) => Region::Worst,
        (std::cmp::Ordering::Less, std::cmp::Ordering::Less) => Region::DebiasTradeoff,
        (std::cmp::Ordering::Greater, std::cmp::Ordering::Greater) => Region::AccuracyTradeoff,
        _ => Region::Boundary,
    }
}

/// One (source task, strategy) outcome: accuracy change on the name task
/// and relative KL change on the profession task of the same dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadrantPoint {
    pub source: String,
    pub strategy: String,
    pub delta_accuracy_pp: Option<f64>,
    pub delta_kl_pct: Option<f64>,
}

/// Pair name-task accuracy changes with profession-task KL changes.
pub fn quadrant_points(reports: &[MetricsReport]) -> Vec<QuadrantPoint> {
    let mut grouped: BTreeMap<(String, String), QuadrantPoint> = BTreeMap::new();
    for r in reports {
        let Some(src) = task_kind_of(&r.source_task) else { continue };
        let Some(tgt) = task_kind_of(&r.target_task) else { continue };
        if src.dimension() != tgt.dimension() {
            continue;
        }
        let p = grouped.entry((r.source_task.clone(), r.strategy.clone())).or_insert_with(|| QuadrantPoint {
            source: r.source_task.clone(),
            strategy: r.strategy.clone(),
            delta_accuracy_pp: None,
            delta_kl_pct: None,
        });
        if tgt.is_name_task() {
            p.delta_accuracy_pp = r.delta_accuracy_pp;
        } else {
            p.delta_kl_pct = r.delta_kl_pct;
        }
    }
    grouped.into_values().collect()
}

fn task_kind_of(task: &str) -> Option<TaskKind> {
    task.split('.').next()?.parse().ok()
}

fn marker(c: &mut Canvas, shape: usize, x: f64, y: f64, fill: &str) {
    let r = 6.0;
    let _ = match shape % 4 {
        0 => writeln!(c.body, r#"<circle cx="{}" cy="{}" r="{}" fill="{fill}"/>"#, num(x), num(y), num(r)),
        1 => writeln!(
            c.body,
            r#"<rect x="{}" y="{}" width="{}" height="{}" fill="{fill}"/>"#,
            num(x - r),
            num(y - r),
            num(2.0 * r),
            num(2.0 * r)
        ),
        2 => writeln!(
            c.body,
            r#"<polygon points="{},{} {},{} {},{}" fill="{fill}"/>"#,
            num(x),
            num(y - r),
            num(x - r),
            num(y + r),
            num(x + r),
            num(y + r)
        ),
        _ => writeln!(
            c.body,
            r#"<polygon points="{},{} {},{} {},{} {},{}" fill="{fill}"/>"#,
            num(x),
            num(y - r),
            num(x + r),
            num(y),
            num(x),
            num(y + r),
            num(x - r),
            num(y)
        ),
    };
}

/// Scatter of (accuracy change, KL change) with shaded outcome regions.
/// Points lacking either coordinate are left out and listed in the legend.
pub fn emit_quadrant_plot(points: &[QuadrantPoint]) -> String {
    let (w, h, m) = (720.0, 520.0, 60.0);
    let plot_w = w - 2.0 * m - 180.0;
    let complete: Vec<&QuadrantPoint> = points.iter().filter(|p| p.delta_accuracy_pp.is_some() && p.delta_kl_pct.is_some()).collect();
    let xr = symmetric_extent(complete.iter().filter_map(|p| p.delta_accuracy_pp), 1.0);
    let yr = symmetric_extent(complete.iter().filter_map(|p| p.delta_kl_pct), 10.0);
    let sx = Scale { d0: -xr, d1: xr, p0: m, p1: m + plot_w };
    let sy = Scale { d0: -yr, d1: yr, p0: h - m, p1: m };
    let mut c = Canvas::new(w, h);
    let (x0, y0) = (sx.at(0.0), sy.at(0.0));
    c.rect(x0, y0, sx.at(xr) - x0, sy.at(-yr) - y0, "#2ca02c", 0.15);
    c.rect(sx.at(-xr), sy.at(yr), x0 - sx.at(-xr), y0 - sy.at(yr), "#d62728", 0.15);
    c.rect(sx.at(-xr), y0, x0 - sx.at(-xr), sy.at(-yr) - y0, "#ffbf00", 0.12);
    c.rect(x0, sy.at(yr), sx.at(xr) - x0, y0 - sy.at(yr), "#ffbf00", 0.12);
    c.line(sx.at(-xr), y0, sx.at(xr), y0, "#333", 1.0, false);
    c.line(x0, sy.at(-yr), x0, sy.at(yr), "#333", 1.0, false);
    for t in [-1.0, -0.5, 0.5, 1.0] {
        c.text(sx.at(t * xr), y0 + 14.0, 10, "middle", "#333", &num(t * xr));
        c.text(x0 - 4.0, sy.at(t * yr) + 3.0, 10, "end", "#333", &num(t * yr));
    }
    c.text(m + plot_w / 2.0, h - 15.0, 12, "middle", "#000", "Δ accuracy (pp)");
    c.text(15.0, h / 2.0, 12, "middle", "#000", "Δ KL (%)");
    c.text(sx.at(xr) - 4.0, sy.at(-yr) - 6.0, 10, "end", "#2ca02c", "ideal");
    c.text(sx.at(-xr) + 4.0, sy.at(yr) + 12.0, 10, "start", "#d62728", "worst");

    let mut sources: Vec<&str> = points.iter().map(|p| p.source.as_str()).collect();
    sources.dedup();
    sources.sort();
    sources.dedup();
    let mut strategies: Vec<&str> = points.iter().map(|p| p.strategy.as_str()).collect();
    strategies.sort();
    strategies.dedup();
    c.body.push_str("<g class=\"points\">\n");
    for p in &complete {
        let color = PALETTE[sources.iter().position(|s| *s == p.source).unwrap_or(0) % PALETTE.len()];
        let shape = strategies.iter().position(|s| *s == p.strategy).unwrap_or(0);
        marker(&mut c, shape, sx.at(p.delta_accuracy_pp.unwrap_or(0.0)), sy.at(p.delta_kl_pct.unwrap_or(0.0)), color);
    }
    c.body.push_str("</g>\n");
    let lx = m + plot_w + 20.0;
    let mut ly = m;
    for (i, s) in sources.iter().enumerate() {
        marker(&mut c, 0, lx, ly - 4.0, PALETTE[i % PALETTE.len()]);
        c.text(lx + 12.0, ly, 11, "start", "#000", s);
        ly += 18.0;
    }
    ly += 8.0;
    for (i, s) in strategies.iter().enumerate() {
        marker(&mut c, i, lx, ly - 4.0, "#555");
        c.text(lx + 12.0, ly, 11, "start", "#000", s);
        ly += 18.0;
    }
    let omitted: Vec<&QuadrantPoint> = points.iter().filter(|p| p.delta_accuracy_pp.is_none() || p.delta_kl_pct.is_none()).collect();
    if !omitted.is_empty() {
        ly += 8.0;
        c.text(lx, ly, 11, "start", "#a00", "omitted (metric undefined):");
        for p in omitted {
            ly += 15.0;
            c.text(lx, ly, 10, "start", "#a00", &format!("{} / {}", p.source, p.strategy));
        }
    }
    c.finish()
}

/// Paired per-item KL bars (baseline, ablated) annotated with the change.
pub fn emit_profession_bars(title: &str, baseline: &BTreeMap<String, f64>, ablated: &BTreeMap<String, f64>) -> String {
    let items: Vec<&String> = {
        let mut v: Vec<&String> = baseline.keys().chain(ablated.keys()).collect();
        v.sort();
        v.dedup();
        v
    };
    let row = 22.0;
    let (m, label_w, bar_w) = (40.0, 120.0, 420.0);
    let h = m * 2.0 + row * items.len().max(1) as f64 + 30.0;
    let w = m * 2.0 + label_w + bar_w + 90.0;
    let max = baseline.values().chain(ablated.values()).fold(1e-9f64, |a, b| a.max(*b));
    let sx = Scale { d0: 0.0, d1: max, p0: m + label_w, p1: m + label_w + bar_w };
    let mut c = Canvas::new(w, h);
    c.text(w / 2.0, 24.0, 13, "middle", "#000", title);
    for (i, item) in items.iter().enumerate() {
        let y = m + i as f64 * row;
        c.text(m + label_w - 6.0, y + 12.0, 11, "end", "#000", item);
        let b = baseline.get(*item);
        let a = ablated.get(*item);
        if let Some(b) = b {
            c.rect(sx.p0, y + 1.0, sx.at(*b) - sx.p0, 9.0, "#1f77b4", 1.0);
        }
        if let Some(a) = a {
            c.rect(sx.p0, y + 10.0, sx.at(*a) - sx.p0, 9.0, "#ff7f0e", 1.0);
        }
        let (text, color) = match (b, a) {
            (Some(b), Some(a)) => {
                let d = a - b;
                let color = if d < 0.0 {
                    "#2ca02c"
                } else if d > 0.0 {
                    "#d62728"
                } else {
                    "#555"
                };
                (format!("Δ {}", num(d)), color)
            }
            _ => ("missing in one condition".to_string(), "#a00"),
        };
        c.text(sx.p1 + 8.0, y + 14.0, 11, "start", color, &text);
    }
    let ly = h - 20.0;
    c.rect(m, ly - 9.0, 10.0, 10.0, "#1f77b4", 1.0);
    c.text(m + 14.0, ly, 11, "start", "#000", "baseline");
    c.rect(m + 90.0, ly - 9.0, 10.0, 10.0, "#ff7f0e", 1.0);
    c.text(m + 104.0, ly, 11, "start", "#000", "ablated");
    c.finish()
}

/// Cumulative attribution mass against k, one polyline per layer, with a
/// vertical marker at `k_marker`.
pub fn emit_topk_curve(curves: &[MassCurve], k_marker: usize) -> String {
    let (w, h, m) = (640.0, 420.0, 55.0);
    let kmax = curves.iter().flat_map(|c| c.points.iter().map(|p| p.0)).max().unwrap_or(1).max(k_marker).max(1) as f64;
    let sx = Scale { d0: 0.0, d1: kmax, p0: m, p1: w - m - 90.0 };
    let sy = Scale { d0: 0.0, d1: 1.0, p0: h - m, p1: m };
    let mut c = Canvas::new(w, h);
    c.line(sx.p0, sy.p0, sx.p1, sy.p0, "#333", 1.0, false);
    c.line(sx.p0, sy.p0, sx.p0, sy.p1, "#333", 1.0, false);
    for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
        c.text(sx.p0 - 6.0, sy.at(t) + 3.0, 10, "end", "#333", &num(t));
    }
    c.text((sx.p0 + sx.p1) / 2.0, h - 15.0, 12, "middle", "#000", "k (features per layer)");
    c.text(15.0, h / 2.0, 12, "middle", "#000", "mass");
    c.text(sx.p1, sy.p0 + 14.0, 10, "end", "#333", &kmax.to_string());
    let km = sx.at(k_marker as f64);
    c.line(km, sy.p0, km, sy.p1, "#888", 1.0, true);
    c.text(km + 3.0, sy.p1 + 10.0, 10, "start", "#555", &format!("k = {k_marker}"));
    for (i, curve) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = curve.points.iter().map(|(k, v)| format!("{},{}", num(sx.at(*k as f64)), num(sy.at(*v)))).collect();
        let _ = writeln!(c.body, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, pts.join(" "));
        let ly = m + 18.0 * i as f64;
        c.line(sx.p1 + 10.0, ly - 4.0, sx.p1 + 26.0, ly - 4.0, color, 2.0, false);
        let note = if curve.all_zero { " (all zero)" } else { "" };
        c.text(sx.p1 + 30.0, ly, 11, "start", "#000", &format!("layer {}{note}", curve.layer));
    }
    c.finish()
}

/// One row per cell with every scalar metric; undefined values are empty.
pub fn write_metrics_table<W: Write>(reports: &[MetricsReport], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let names: Vec<&str> = reports.first().map(|r| r.scalar_metrics().into_iter().map(|(n, _)| n).collect()).unwrap_or_default();
    let mut header = vec!["source_task", "strategy", "target_task"];
    header.extend(names.iter().copied());
    w.write_record(&header)?;
    for r in reports {
        let mut row = vec![r.source_task.clone(), r.strategy.clone(), r.target_task.clone()];
        row.extend(r.scalar_metrics().into_iter().map(|(_, v)| v.map(|x| format!("{x:.6}")).unwrap_or_default()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn applies(metric: &str, name_target: bool) -> bool {
    let gold_only = metric.contains("accuracy") || metric == "worst_drop_label";
    let reference_only = metric.contains("kl") || metric == "worst_drop_item";
    if name_target {
        !reference_only
    } else {
        !gold_only
    }
}

/// Undefined metrics and plot points that could not be drawn. Metrics that
/// do not apply to a target's kind (accuracy on profession tasks, KL on name
/// tasks) are not listed.
pub fn omissions(reports: &[MetricsReport], points: &[QuadrantPoint]) -> Vec<String> {
    let mut out = Vec::new();
    for p in points {
        if p.delta_accuracy_pp.is_none() || p.delta_kl_pct.is_none() {
            out.push(format!("quadrant: {} / {} omitted (accuracy or KL change undefined)", p.source, p.strategy));
        }
    }
    for r in reports {
        let name_target = task_kind_of(&r.target_task).is_some_and(|k| k.is_name_task());
        for (m, v) in r.scalar_metrics() {
            if v.is_none() && applies(m, name_target) {
                out.push(format!("metric: {} / {} / {}: {m} undefined", r.source_task, r.strategy, r.target_task));
            }
        }
        let missing: Vec<&String> = r
            .per_item_kl_baseline
            .keys()
            .filter(|k| !r.per_item_kl_ablated.contains_key(*k))
            .chain(r.per_item_kl_ablated.keys().filter(|k| !r.per_item_kl_baseline.contains_key(*k)))
            .collect();
        for item in missing {
            out.push(format!("bars: {} / {} / {}: `{item}` present in one condition only", r.source_task, r.strategy, r.target_task));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(s: &str, dx: Option<f64>, dy: Option<f64>) -> QuadrantPoint {
        QuadrantPoint { source: s.into(), strategy: "attribution".into(), delta_accuracy_pp: dx, delta_kl_pct: dy }
    }

    #[test]
    fn regions() {
        assert_eq!(region(0.8, -6.1), Region::Ideal);
        assert_eq!(region(0.0, 0.0), Region::Boundary);
        assert_eq!(region(-1.0, 3.0), Region::Worst);
        assert_eq!(region(-1.0, -3.0), Region::DebiasTradeoff);
    }

    #[test]
    fn quadrant_plot_omits_incomplete_points() {
        let svg = emit_quadrant_plot(&[pt("gender-name.demo-r", Some(0.8), Some(-6.1)), pt("race-name.demo-r", None, Some(2.0))]);
        assert!(svg.starts_with("<svg"));
        let points = &svg[svg.find(r#"<g class="points">"#).unwrap()..svg.find("</g>").unwrap()];
        assert_eq!(points.matches("<circle").count(), 1);
        assert!(svg.contains("omitted"));
        assert!(svg.contains("race-name.demo-r / attribution"));
        let empty = emit_quadrant_plot(&[]);
        assert!(empty.contains("<line"));
        assert!(empty.contains("<g class=\"points\">\n</g>"));
    }

    #[test]
    fn bar_annotations_follow_sign() {
        let b = BTreeMap::from([("engineer".to_string(), 2.0), ("janitor".to_string(), 0.5), ("cook".to_string(), 0.3)]);
        let a = BTreeMap::from([("engineer".to_string(), 0.73), ("janitor".to_string(), 0.86), ("cook".to_string(), 0.3)]);
        let svg = emit_profession_bars("t", &b, &a);
        assert!(svg.contains(r##"fill="#2ca02c" font-family="sans-serif">Δ -1.27<"##));
        assert!(svg.contains(r##"fill="#d62728" font-family="sans-serif">Δ 0.36<"##));
        assert!(svg.contains(">Δ 0.00<"));
        let partial = emit_profession_bars("t", &b, &BTreeMap::new());
        assert!(partial.contains("missing in one condition"));
    }

    #[test]
    fn omissions_skip_inapplicable_metrics() {
        let json = serde_json::json!({
            "source_task": "gender-name.demo-r", "strategy": "attribution", "target_task": "gender-name.demo-r",
            "accuracy_baseline": 0.5, "accuracy_ablated": null, "delta_accuracy_pp": null,
            "kl_macro_baseline": null, "kl_macro_ablated": null, "kl_micro_baseline": null, "kl_micro_ablated": null,
            "normalized_kl_baseline": null, "normalized_kl_ablated": null, "delta_kl_pct": null, "delta_kl_micro_pct": null,
            "delta_ppl_pct": 1.0, "validity_baseline": 1.0, "validity_ablated": 1.0,
            "per_item_kl_baseline": {}, "per_item_kl_ablated": {},
            "errors": {"redistribution": 0.0, "worst_drop_label": 0.0, "worst_drop_item": null,
                       "majority_amplification": 0.0, "count_instability": 0.0, "ceiling_floor": 0.0}
        });
        let r: MetricsReport = serde_json::from_value(json).unwrap();
        let lines = omissions(&[r], &[]);
        assert_eq!(lines.len(), 2, "{lines:?}");
        assert!(lines.iter().all(|l| l.contains("accuracy")));
    }

    #[test]
    fn topk_curve_marks_configured_k() {
        let flat = MassCurve { layer: 0, points: vec![(1, 1.0), (10, 1.0)], all_zero: false };
        let two = MassCurve { layer: 1, points: vec![(1, 0.2), (10, 1.0)], all_zero: false };
        let svg = emit_topk_curve(&[flat, two], 7);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("k = 7"));
        assert!(svg.contains("layer 1"));
    }
}
