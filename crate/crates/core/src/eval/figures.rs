use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::RunReport;
use crate::error::{Error, Result};

/// Documented at the top of every box-plot sidecar.
pub const QUANTILE_METHOD: &str = "quantiles: linear interpolation between closest ranks; \
for ascending x[0..n-1] and h = (n-1)*p, q(p) = x[floor(h)] + (h - floor(h)) * (x[floor(h)+1] - x[floor(h)]); \
whiskers span min..max";

/// Quantile of ascending `sorted` by linear interpolation between closest ranks.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
}

impl BoxStats {
    pub fn of(values: &[f64]) -> Self {
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        Self {
            min: s[0],
            q1: quantile(&s, 0.25),
            median: quantile(&s, 0.5),
            q3: quantile(&s, 0.75),
            max: s[s.len() - 1],
            mean: super::mean_std(values).0,
        }
    }

    fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("min", self.min),
            ("q1", self.q1),
            ("median", self.median),
            ("q3", self.q3),
            ("max", self.max),
            ("mean", self.mean),
        ]
    }
}

/// Shortest round-trip decimal; the same text appears in the SVG and the CSV.
fn num(v: f64) -> String {
    format!("{v}")
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn xml(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

const PLOT_H: f64 = 300.0;
const TOP: f64 = 30.0;
const LEFT: f64 = 60.0;

fn y_of(v: f64) -> f64 {
    TOP + (1.0 - v.clamp(0.0, 1.0)) * PLOT_H
}

fn svg_open(out: &mut String, width: f64, title: &str) {
    let h = TOP + PLOT_H + 90.0;
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{h}" viewBox="0 0 {width} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<text x="{}" y="18" font-size="14">{}</text>"#, LEFT, xml(title));
    let _ = writeln!(
        out,
        r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{}" stroke="black"/>"#,
        TOP + PLOT_H
    );
    for i in 0..=4 {
        let v = i as f64 / 4.0;
        let y = y_of(v);
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{:.2}" text-anchor="end">{v:.2}</text><line x1="{}" y1="{y:.2}" x2="{LEFT}" y2="{y:.2}" stroke="black"/>"#,
            LEFT - 6.0,
            y + 4.0,
            LEFT - 3.0
        );
    }
}

fn box_plot(report: &RunReport) -> (String, String) {
    let mut csv = format!("# {QUANTILE_METHOD}\nseries,kind,key,value\n");
    let slot = 90.0;
    let width = LEFT + slot * report.eval_results.len() as f64 + 20.0;
    let mut svg = String::new();
    svg_open(&mut svg, width, "Per-sample Dice");
    for (i, r) in report.eval_results.iter().enumerate() {
        let series = format!("{} | {}", r.model, r.dataset_name);
        let sf = csv_field(&series);
        for (id, d) in r.sample_ids.iter().zip(&r.per_sample_dice) {
            let _ = writeln!(csv, "{sf},sample,{},{}", csv_field(id), num(*d));
        }
        let st = BoxStats::of(&r.per_sample_dice);
        for (k, v) in st.named() {
            let _ = writeln!(csv, "{sf},stat,{k},{}", num(v));
        }
        let cx = LEFT + slot * (i as f64 + 0.5);
        let (x0, x1) = (cx - 20.0, cx + 20.0);
        let _ = writeln!(svg, r#"<g class="series" data-series="{}">"#, xml(&series));
        let _ = writeln!(
            svg,
            r#"<line class="whisker" x1="{cx}" y1="{:.2}" x2="{cx}" y2="{:.2}" stroke="black"/>"#,
            y_of(st.max),
            y_of(st.min)
        );
        for (k, v) in [("min", st.min), ("max", st.max)] {
            let _ = writeln!(
                svg,
                r#"<line class="whisker-cap" data-stat="{k}" data-value="{}" x1="{}" y1="{:.2}" x2="{}" y2="{:.2}" stroke="black"/>"#,
                num(v),
                cx - 10.0,
                y_of(v),
                cx + 10.0,
                y_of(v)
            );
        }
        let _ = writeln!(
            svg,
            r##"<rect class="box" data-stat-q1="{}" data-stat-q3="{}" x="{x0}" y="{:.2}" width="{}" height="{:.2}" fill="#9ecae1" stroke="black"/>"##,
            num(st.q1),
            num(st.q3),
            y_of(st.q3),
            x1 - x0,
            y_of(st.q1) - y_of(st.q3)
        );
        let _ = writeln!(
            svg,
            r#"<line class="median" data-stat="median" data-value="{}" x1="{x0}" y1="{:.2}" x2="{x1}" y2="{:.2}" stroke="black" stroke-width="2"/>"#,
            num(st.median),
            y_of(st.median),
            y_of(st.median)
        );
        let _ = writeln!(
            svg,
            r#"<circle class="mean" data-stat="mean" data-value="{}" cx="{cx}" cy="{:.2}" r="3" fill="red"/>"#,
            num(st.mean),
            y_of(st.mean)
        );
        for (id, d) in r.sample_ids.iter().zip(&r.per_sample_dice) {
            let _ = writeln!(
                svg,
                r#"<circle class="sample" data-sample="{}" data-value="{}" cx="{}" cy="{:.2}" r="1.5" fill="black" fill-opacity="0.4"/>"#,
                xml(id),
                num(*d),
                cx + 26.0,
                y_of(*d)
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{cx}" y="{}" text-anchor="middle">{}</text><text x="{cx}" y="{}" text-anchor="middle">{}</text></g>"#,
            TOP + PLOT_H + 18.0,
            xml(&r.model),
            TOP + PLOT_H + 32.0,
            xml(&r.dataset_name)
        );
    }
    svg.push_str("</svg>\n");
    (svg, csv)
}

fn bar_chart(report: &RunReport) -> (String, String) {
    let mut bars: Vec<(String, String, &'static str, f64)> = report
        .eval_results
        .iter()
        .map(|r| (r.dataset_name.clone(), r.model.clone(), "measured", r.mean_dice))
        .collect();
    if let Some(t) = &report.reference_table {
        bars.extend(
            t.dice
                .iter()
                .map(|d| (d.dataset.clone(), d.model.clone(), "reference", d.dice)),
        );
    }
    let mut csv = String::from(
        "# bar height = mean Dice (measured) or published value (reference)\ndataset,model,source,value\n",
    );
    let slot = 34.0;
    let width = LEFT + slot * bars.len() as f64 + 20.0;
    let mut svg = String::new();
    svg_open(&mut svg, width, "Mean Dice");
    for (i, (ds, model, source, v)) in bars.iter().enumerate() {
        let _ = writeln!(csv, "{},{},{source},{}", csv_field(ds), csv_field(model), num(*v));
        let x = LEFT + slot * i as f64 + 4.0;
        let fill = if *source == "measured" { "#3182bd" } else { "#bdbdbd" };
        let _ = writeln!(
            svg,
            r#"<rect class="bar" data-dataset="{}" data-model="{}" data-source="{source}" data-value="{}" x="{x}" y="{:.2}" width="{}" height="{:.2}" fill="{fill}" stroke="black"/>"#,
            xml(ds),
            xml(model),
            num(*v),
            y_of(*v),
            slot - 8.0,
            TOP + PLOT_H - y_of(*v)
        );
        let _ = writeln!(
            svg,
            r#"<text transform="translate({:.1},{}) rotate(60)" font-size="9">{} / {}</text>"#,
            x + 6.0,
            TOP + PLOT_H + 6.0,
            xml(ds),
            xml(model)
        );
    }
    svg.push_str("</svg>\n");
    (svg, csv)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `box_plot.svg/.csv` (when per-sample scores exist) and
/// `bar_chart.svg/.csv`, returning the paths by artifact name.
pub fn emit_figures(report: &RunReport, out_dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let has_ref = report.reference_table.as_ref().is_some_and(|t| !t.dice.is_empty());
    if report.eval_results.is_empty() && !has_ref {
        return Err(Error::Eval(
            "nothing to plot: no results and no reference values".into(),
        ));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut out = BTreeMap::new();
    if !report.eval_results.is_empty() {
        let (svg, csv) = box_plot(report);
        for (name, text) in [("box_plot.svg", svg), ("box_plot.csv", csv)] {
            let p = out_dir.join(name);
            write(&p, &text)?;
            out.insert(name.to_string(), p);
        }
    }
    let (svg, csv) = bar_chart(report);
    for (name, text) in [("bar_chart.svg", svg), ("bar_chart.csv", csv)] {
        let p = out_dir.join(name);
        write(&p, &text)?;
        out.insert(name.to_string(), p);
    }
    Ok(out)
}
