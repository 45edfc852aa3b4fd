//! SVG figures drawn from report CSVs: per-group boxplots and ablation bars.
//!
//! Plotting reads only report files, never a model.

use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;

use crate::codec::write_file;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct BoxRow {
    pub group: String,
    pub metric: String,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct AblationBar {
    pub mixup: String,
    pub latent_noise: String,
    pub f1: f64,
    pub relative_f1: f64,
    pub miou: f64,
    pub relative_miou: f64,
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let rows = r
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| Error::format(path, e.to_string()))?;
    if rows.is_empty() {
        return Err(Error::format(path, "no rows"));
    }
    Ok(rows)
}

pub fn read_boxplot_csv(path: &Path) -> Result<Vec<BoxRow>> {
    read_rows(path)
}

pub fn read_ablation_csv(path: &Path) -> Result<Vec<AblationBar>> {
    read_rows(path)
}

const W: f64 = 640.0;
const H: f64 = 360.0;
const LEFT: f64 = 60.0;
const BOTTOM: f64 = 60.0;
const TOP: f64 = 40.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Maps a percentage to a y coordinate over `[lo, 100]`.
fn y_of(v: f64, lo: f64) -> f64 {
    let plot_h = H - TOP - BOTTOM;
    TOP + plot_h * (1.0 - ((v - lo) / (100.0 - lo)).clamp(0.0, 1.0))
}

fn axis_lo(values: impl Iterator<Item = f64>) -> f64 {
    let min = values.fold(100.0_f64, f64::min);
    ((min - 5.0) / 10.0).floor().clamp(0.0, 9.0) * 10.0
}

fn frame(title: &str, lo: f64) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        W / 2.0,
        escape(title)
    );
    let mut t = lo;
    while t <= 100.0 + 1e-9 {
        let y = y_of(t, lo);
        let _ = writeln!(
            s,
            "<line x1=\"{LEFT}\" y1=\"{y:.1}\" x2=\"{}\" y2=\"{y:.1}\" stroke=\"#ddd\"/>\
             <text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{t:.0}</text>",
            W - 20.0,
            LEFT - 6.0,
            y + 4.0
        );
        t += if 100.0 - lo > 40.0 { 20.0 } else { 5.0 };
    }
    s
}

/// One box per group for `metric`.
pub fn boxplot_svg(rows: &[BoxRow], metric: &str) -> Result<String> {
    let boxes: Vec<&BoxRow> = rows.iter().filter(|r| r.metric == metric).collect();
    if boxes.is_empty() {
        return Err(Error::Argument(format!("no rows for metric {metric}")));
    }
    let lo = axis_lo(boxes.iter().map(|b| b.min));
    let mut s = frame(&format!("{metric} by group"), lo);
    let slot = (W - LEFT - 20.0) / boxes.len() as f64;
    for (i, b) in boxes.iter().enumerate() {
        let cx = LEFT + slot * (i as f64 + 0.5);
        let half = (slot * 0.3).min(30.0);
        let (ymin, yq1, ymed, yq3, ymax) = (
            y_of(b.min, lo),
            y_of(b.q1, lo),
            y_of(b.median, lo),
            y_of(b.q3, lo),
            y_of(b.max, lo),
        );
        let _ = writeln!(
            s,
            "<line x1=\"{cx:.1}\" y1=\"{ymax:.1}\" x2=\"{cx:.1}\" y2=\"{yq3:.1}\" stroke=\"black\"/>\
             <line x1=\"{cx:.1}\" y1=\"{yq1:.1}\" x2=\"{cx:.1}\" y2=\"{ymin:.1}\" stroke=\"black\"/>\
             <line x1=\"{:.1}\" y1=\"{ymax:.1}\" x2=\"{:.1}\" y2=\"{ymax:.1}\" stroke=\"black\"/>\
             <line x1=\"{:.1}\" y1=\"{ymin:.1}\" x2=\"{:.1}\" y2=\"{ymin:.1}\" stroke=\"black\"/>\
             <rect x=\"{:.1}\" y=\"{yq3:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"#9ecae1\" stroke=\"black\"/>\
             <line x1=\"{:.1}\" y1=\"{ymed:.1}\" x2=\"{:.1}\" y2=\"{ymed:.1}\" stroke=\"#d62728\" stroke-width=\"2\"/>\
             <text x=\"{cx:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            cx - half / 2.0,
            cx + half / 2.0,
            cx - half / 2.0,
            cx + half / 2.0,
            cx - half,
            2.0 * half,
            (yq1 - yq3).max(0.5),
            cx - half,
            cx + half,
            H - BOTTOM + 16.0,
            escape(&b.group)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Paired F1 / mIoU bars per regime.
pub fn ablation_svg(bars: &[AblationBar]) -> Result<String> {
    if bars.is_empty() {
        return Err(Error::Argument("no ablation rows".into()));
    }
    let lo = axis_lo(bars.iter().flat_map(|b| [b.f1, b.miou]));
    let mut s = frame("augmentation ablation (F1, mIoU)", lo);
    let slot = (W - LEFT - 20.0) / bars.len() as f64;
    let base = y_of(lo, lo);
    for (i, b) in bars.iter().enumerate() {
        let x0 = LEFT + slot * i as f64 + slot * 0.15;
        let bw = slot * 0.35;
        for (j, (v, colour)) in [(b.f1, "#3182bd"), (b.miou, "#e6550d")].into_iter().enumerate() {
            let y = y_of(v, lo);
            let _ = writeln!(
                s,
                "<rect x=\"{:.1}\" y=\"{y:.1}\" width=\"{bw:.1}\" height=\"{:.1}\" fill=\"{colour}\"/>\
                 <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"9\">{v:.2}</text>",
                x0 + j as f64 * bw,
                base - y,
                x0 + (j as f64 + 0.5) * bw,
                y - 3.0
            );
        }
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">mixup {} / noise {}</text>",
            x0 + bw,
            H - BOTTOM + 16.0,
            escape(&b.mixup),
            escape(&b.latent_noise)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Renders every metric of a boxplot CSV into `out_dir/<stem>_<metric>.svg`.
pub fn render_boxplots(csv: &Path, out_dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let rows = read_boxplot_csv(csv)?;
    let stem = csv.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    let mut metrics: Vec<&str> = Vec::new();
    for r in &rows {
        if !metrics.contains(&r.metric.as_str()) {
            metrics.push(&r.metric);
        }
    }
    metrics
        .into_iter()
        .map(|m| {
            let p = out_dir.join(format!("{stem}_{m}.svg"));
            write_file(&p, boxplot_svg(&rows, m)?.as_bytes())?;
            Ok(p)
        })
        .collect()
}

pub fn render_ablation(csv: &Path, out_dir: &Path) -> Result<std::path::PathBuf> {
    let bars = read_ablation_csv(csv)?;
    let stem = csv.file_stem().and_then(|s| s.to_str()).unwrap_or("ablation");
    let p = out_dir.join(format!("{stem}.svg"));
    write_file(&p, ablation_svg(&bars)?.as_bytes())?;
    Ok(p)
}
