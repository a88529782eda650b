//! Static SVG line charts of training logs, one polyline per run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::trainer::{EpochRecord, TrainLog};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 160.0;
const TOP: f64 = 32.0;
const BOTTOM: f64 = 48.0;
const TICKS: usize = 5;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// A named training log.
#[derive(Clone, Debug)]
pub struct Series {
    pub name: String,
    pub log: TrainLog,
}

/// Run name for a log file: its parent directory name, else the file stem.
pub fn run_name(path: &Path) -> String {
    path.parent()
        .and_then(|p| p.file_name())
        .or_else(|| path.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into())
}

pub fn load_series(paths: &[PathBuf]) -> Result<Vec<Series>> {
    paths
        .iter()
        .map(|p| {
            Ok(Series {
                name: run_name(p),
                log: TrainLog::read_csv(p)?,
            })
        })
        .collect()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Line chart of `metric` against epoch for every series.
pub fn line_chart(series: &[Series], title: &str, metric: fn(&EpochRecord) -> f64) -> String {
    let points = || series.iter().flat_map(|s| s.log.records.iter());
    let max_epoch = points().map(|r| r.epoch).max().unwrap_or(0).max(1) as f64;
    let mut y_max = points().map(metric).fold(0.0, f64::max);
    if y_max <= 0.0 {
        y_max = 1.0;
    }
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let x_of = |e: f64| LEFT + plot_w * e / max_epoch;
    let y_of = |v: f64| TOP + plot_h * (1.0 - v / y_max);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        LEFT + plot_w / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<path d="M{LEFT:.1},{TOP:.1} V{:.1} H{:.1}" fill="none" stroke="black"/>"#,
        TOP + plot_h,
        LEFT + plot_w
    );
    for i in 0..=TICKS {
        let frac = i as f64 / TICKS as f64;
        let v = y_max * frac;
        let y = y_of(v);
        let _ = writeln!(
            s,
            r##"<line x1="{:.1}" y1="{y:.1}" x2="{LEFT:.1}" y2="{y:.1}" stroke="black"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.3}</text>"##,
            LEFT - 4.0,
            LEFT - 6.0,
            y + 4.0
        );
        let e = max_epoch * frac;
        let x = x_of(e);
        let _ = writeln!(
            s,
            r##"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="black"/><text x="{x:.1}" y="{:.1}" text-anchor="middle">{e:.0}</text>"##,
            TOP + plot_h,
            TOP + plot_h + 4.0,
            TOP + plot_h + 16.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">epoch</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 10.0
    );
    for (i, series) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts = series
            .log
            .records
            .iter()
            .map(|r| format!("{:.2},{:.2}", x_of(r.epoch as f64), y_of(metric(r))))
            .collect::<Vec<_>>()
            .join(" ");
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>"#
        );
        let ly = TOP + 8.0 + 18.0 * i as f64;
        let lx = WIDTH - RIGHT + 12.0;
        let _ = writeln!(
            s,
            r#"<g class="legend"><line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text></g>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(&series.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `mae.svg` and `leakage.svg` into `out_dir` and returns their paths.
pub fn write_charts(series: &[Series], out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let charts: [(&str, &str, fn(&EpochRecord) -> f64); 2] = [
        ("mae.svg", "Validation MAE", |r| r.val_mae),
        ("leakage.svg", "Validation leakage", |r| r.val_leakage),
    ];
    let mut written = Vec::new();
    for (file, title, metric) in charts {
        let path = out_dir.join(file);
        std::fs::write(&path, line_chart(series, title, metric))?;
        written.push(path);
    }
    Ok(written)
}
