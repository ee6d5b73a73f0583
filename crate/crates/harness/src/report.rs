//! CSV tables and SVG line plots of metric against NFE.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use sha2::{Digest, Sha256};
use wsd_core::metrics::{read_metric_rows, write_metric_rows, MetricRow};

use crate::sweep::best_per_nfe;

/// One named polyline in data coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 60.0;
const COLOURS: [&str; 6] = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// SVG with a log-scaled x axis and one polyline per series.
pub fn svg_plot(title: &str, y_label: &str, series: &[Series]) -> String {
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x.max(1e-12).ln());
        x1 = x1.max(x.max(1e-12).ln());
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !(x1 > x0) {
        x1 = x0 + 1.0;
    }
    if !(y1 > y0) {
        y1 = y0 + 1.0;
    }
    let px = |x: f64| MARGIN + (x.max(1e-12).ln() - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let py = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);

    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="24" text-anchor="middle" font-size="16">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        out,
        r#"<line x1="{MARGIN}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{b}" stroke="black"/>"#,
        b = H - MARGIN,
        r = W - MARGIN
    );
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">NFE (log scale)</text>"#, W / 2.0, H - 20.0);
    let _ = writeln!(
        out,
        r#"<text x="16" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 16 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end" font-size="10">{y1:.4}</text>"#, MARGIN - 4.0, MARGIN + 4.0);
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end" font-size="10">{y0:.4}</text>"#, MARGIN - 4.0, H - MARGIN);
    for (i, s) in series.iter().enumerate() {
        let colour = COLOURS[i % COLOURS.len()];
        let coords: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{colour}" stroke-width="2" points="{}"/>"#,
            coords.join(" ")
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-size="12" fill="{colour}">{}</text>"#,
            W - MARGIN + 4.0,
            MARGIN + 16.0 * i as f64,
            escape(&s.name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Best-per-NFE curve of every mode for `metric`, ordered by NFE.
pub fn mode_series(rows: &[MetricRow], metric: &str) -> Vec<Series> {
    let mut by_mode: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for r in best_per_nfe(rows).into_iter().filter(|r| r.metric_name == metric) {
        by_mode.entry(r.mode).or_default().push((r.nfe as f64, r.value));
    }
    by_mode
        .into_iter()
        .map(|(name, mut points)| {
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series { name, points }
        })
        .collect()
}

fn content_hash(rows: &[MetricRow]) -> Result<String> {
    let mut buf = Vec::new();
    write_metric_rows(&mut buf, rows)?;
    Ok(Sha256::digest(&buf).iter().take(6).map(|b| format!("{b:02x}")).collect())
}

/// Writes `<run_id>-<hash>-metrics.csv`, `<run_id>-<hash>-best.csv` and one
/// `<run_id>-<hash>-<metric>.svg` per metric measured at more than one NFE.
/// Empty input writes nothing and fails.
pub fn emit_report(dir: &Path, run_id: &str, config_hash: &str, rows: &[MetricRow]) -> Result<Vec<PathBuf>> {
    if rows.is_empty() {
        bail!("no metric rows to report");
    }
    fs::create_dir_all(dir)?;
    let stem = format!("{run_id}-{config_hash}");
    let mut written = Vec::new();

    let all = dir.join(format!("{stem}-metrics.csv"));
    write_metric_rows(File::create(&all)?, rows)?;
    written.push(all);
    let best = dir.join(format!("{stem}-best.csv"));
    write_metric_rows(File::create(&best)?, &best_per_nfe(rows))?;
    written.push(best);

    let mut metrics: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for r in rows {
        metrics.entry(&r.metric_name).or_default().push(r.nfe);
    }
    for (metric, mut nfes) in metrics {
        nfes.sort_unstable();
        nfes.dedup();
        if nfes.len() < 2 {
            continue;
        }
        let path = dir.join(format!("{stem}-{metric}.svg"));
        fs::write(&path, svg_plot(&format!("{metric} ({run_id})"), metric, &mode_series(rows, metric)))?;
        written.push(path);
    }
    Ok(written)
}

/// Merges every `*-metrics.csv` under `dir` and reports the union as run `report`.
pub fn report_directory(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut inputs: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.ends_with("-metrics.csv") && !n.starts_with("report-"))
        })
        .collect();
    inputs.sort();
    let mut rows = Vec::new();
    for p in &inputs {
        rows.extend(read_metric_rows(File::open(p)?)?);
    }
    let hash = content_hash(&rows)?;
    emit_report(dir, "report", &hash, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(mode: &str, method: &str, nfe: usize, value: f64) -> MetricRow {
        MetricRow {
            run_id: "x".into(),
            task: "inpainting".into(),
            mode: mode.into(),
            method: method.into(),
            grid: "uniform".into(),
            nfe,
            warmth: 1.0,
            metric_name: "energy_distance".into(),
            value,
            n_samples: 10,
            seed: 0,
        }
    }

    #[test]
    fn two_series_three_points() {
        let rows: Vec<MetricRow> = [2, 4, 8]
            .iter()
            .flat_map(|&n| [r("baseline", "euler", n, 1.0 / n as f64), r("warm_blended", "euler", n, 0.5 / n as f64)])
            .collect();
        let svg = svg_plot("t", "ed", &mode_series(&rows, "energy_distance"));
        let lines: Vec<&str> = svg.lines().filter(|l| l.starts_with("<polyline")).collect();
        assert_eq!(lines.len(), 2);
        for l in lines {
            let pts = l.split("points=\"").nth(1).unwrap().trim_end_matches("\"/>");
            assert_eq!(pts.split(' ').count(), 3);
        }
    }

    #[test]
    fn best_series_is_the_lower_envelope() {
        let rows = vec![
            r("m", "euler", 2, 3.0),
            r("m", "midpoint", 2, 2.0),
            r("m", "euler", 4, 1.0),
            r("m", "midpoint", 4, 1.5),
        ];
        let s = mode_series(&rows, "energy_distance");
        assert_eq!(s[0].points, vec![(2.0, 2.0), (4.0, 1.0)]);
    }

    #[test]
    fn emitted_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![r("m", "rk4", 4, 0.123456789012345), r("m", "dpm3", 6, 1e-17)];
        let files = emit_report(dir.path(), "run1", "abc", &rows).unwrap();
        let name = files[0].file_name().unwrap().to_str().unwrap();
        assert!(name.starts_with("run1-abc"));
        let back = read_metric_rows(File::open(&files[0]).unwrap()).unwrap();
        assert_eq!(back, rows);
    }

    #[test]
    fn empty_results_write_nothing() {
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_report(dir.path(), "run", "h", &[]).is_err());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }
}
