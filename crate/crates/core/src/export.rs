//! Cross-seed aggregation of metrics files into a merged CSV and an SVG chart.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rundir::METRICS_HEADER;

/// Metric columns aggregated across runs (everything but `iteration`).
pub fn metric_columns() -> &'static [&'static str] {
    &METRICS_HEADER[1..]
}

/// One run's metrics: iteration -> column values (None when the cell is empty).
pub type MetricsTable = BTreeMap<usize, Vec<Option<f64>>>;

pub fn read_metrics(path: &Path) -> Result<MetricsTable> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let cols: Vec<usize> = METRICS_HEADER
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h == *name)
                .ok_or_else(|| Error::config("metrics.csv", format!("missing column '{name}' in {}", path.display())))
        })
        .collect::<Result<_>>()?;
    let mut table = MetricsTable::new();
    for row in rdr.records() {
        let row = row?;
        let cell = |i: usize| row.get(cols[i]).unwrap_or("").trim();
        let it: usize = cell(0)
            .parse()
            .map_err(|_| Error::config("metrics.csv", format!("bad iteration '{}'", cell(0))))?;
        let vals = (1..cols.len())
            .map(|i| {
                let c = cell(i);
                if c.is_empty() {
                    Ok(None)
                } else {
                    c.parse::<f64>()
                        .map(Some)
                        .map_err(|_| Error::config("metrics.csv", format!("bad value '{c}'")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        table.insert(it, vals);
    }
    Ok(table)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub iteration: usize,
    pub runs: usize,
    /// Per metric column: (mean, standard error), None when no run had a value.
    pub stats: Vec<Option<(f64, f64)>>,
}

/// Mean and standard error of the mean (sample std / sqrt(n); zero for n = 1).
pub fn mean_stderr(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some((mean, (var / n).sqrt()))
}

pub fn aggregate(tables: &[MetricsTable]) -> Vec<Aggregate> {
    let mut iterations: Vec<usize> = tables.iter().flat_map(|t| t.keys().copied()).collect();
    iterations.sort_unstable();
    iterations.dedup();
    let ncols = metric_columns().len();
    iterations
        .into_iter()
        .map(|it| {
            let rows: Vec<&Vec<Option<f64>>> = tables.iter().filter_map(|t| t.get(&it)).collect();
            let stats = (0..ncols)
                .map(|c| {
                    let vals: Vec<f64> = rows.iter().filter_map(|r| r[c]).collect();
                    mean_stderr(&vals)
                })
                .collect();
            Aggregate {
                iteration: it,
                runs: rows.len(),
                stats,
            }
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExportReport {
    pub used: Vec<PathBuf>,
    pub skipped: Vec<(PathBuf, String)>,
    pub csv_path: PathBuf,
    pub svg_path: PathBuf,
}

/// Reads `metrics.csv` from each run directory, writes `curves.csv` and
/// `curves.svg` into `out`. Directories without usable metrics are skipped.
pub fn export_runs(run_dirs: &[PathBuf], out: &Path) -> Result<ExportReport> {
    let mut report = ExportReport::default();
    let mut tables = Vec::new();
    for dir in run_dirs {
        let path = dir.join("metrics.csv");
        if !path.exists() {
            report.skipped.push((dir.clone(), "metrics.csv not found".into()));
            continue;
        }
        match read_metrics(&path) {
            Ok(t) if !t.is_empty() => {
                tables.push(t);
                report.used.push(dir.clone());
            }
            Ok(_) => report.skipped.push((dir.clone(), "metrics.csv has no rows".into())),
            Err(e) => report.skipped.push((dir.clone(), e.to_string())),
        }
    }
    if tables.is_empty() {
        return Err(Error::EmptyInput("run directories with metrics"));
    }
    let agg = aggregate(&tables);
    std::fs::create_dir_all(out)?;
    report.csv_path = out.join("curves.csv");
    report.svg_path = out.join("curves.svg");
    write_csv(&agg, &report.csv_path)?;
    std::fs::write(&report.svg_path, render_svg(&agg))?;
    Ok(report)
}

fn write_csv(agg: &[Aggregate], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["iteration".to_string(), "runs".to_string()];
    for c in metric_columns() {
        header.push(format!("{c}_mean"));
        header.push(format!("{c}_stderr"));
    }
    w.write_record(&header)?;
    for a in agg {
        let mut row = vec![a.iteration.to_string(), a.runs.to_string()];
        for s in &a.stats {
            match s {
                Some((m, e)) => {
                    row.push(m.to_string());
                    row.push(e.to_string());
                }
                None => {
                    row.push(String::new());
                    row.push(String::new());
                }
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

const PANELS: [(&str, &str); 3] = [
    ("success_rate", "Success rate"),
    ("avg_return", "Average return"),
    ("mmd_metric", "MMD to preferred set"),
];

/// Mean curves with a shaded one-standard-error band, one panel per metric.
pub fn render_svg(agg: &[Aggregate]) -> String {
    let (w, h, pad) = (640.0, 220.0, 40.0);
    let total_h = h * PANELS.len() as f64;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{total_h}" font-family="sans-serif" font-size="11">"#
    );
    let max_it = agg.iter().map(|a| a.iteration).max().unwrap_or(0).max(1) as f64;
    for (p, (col, title)) in PANELS.iter().enumerate() {
        let c = metric_columns().iter().position(|n| n == col).expect("known column");
        let top = p as f64 * h;
        let pts: Vec<(f64, f64, f64)> = agg
            .iter()
            .filter_map(|a| a.stats[c].map(|(m, e)| (a.iteration as f64, m, e)))
            .collect();
        let _ = writeln!(svg, r#"<text x="{pad}" y="{}">{title}</text>"#, top + 16.0);
        let _ = writeln!(
            svg,
            r##"<rect x="{pad}" y="{}" width="{}" height="{}" fill="none" stroke="#999"/>"##,
            top + 24.0,
            w - 2.0 * pad,
            h - 48.0
        );
        if pts.is_empty() {
            continue;
        }
        let lo = pts.iter().map(|(_, m, e)| m - e).fold(f64::INFINITY, f64::min);
        let hi = pts.iter().map(|(_, m, e)| m + e).fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = if hi - lo < 1e-12 { (lo - 0.5, hi + 0.5) } else { (lo, hi) };
        let x = |it: f64| pad + it / max_it * (w - 2.0 * pad);
        let y = |v: f64| top + 24.0 + (hi - v) / (hi - lo) * (h - 48.0);
        let mut band = String::new();
        for (it, m, e) in &pts {
            let _ = write!(band, "{:.2},{:.2} ", x(*it), y(m + e));
        }
        for (it, m, e) in pts.iter().rev() {
            let _ = write!(band, "{:.2},{:.2} ", x(*it), y(m - e));
        }
        let _ = writeln!(svg, r##"<polygon points="{}" fill="#4c72b0" fill-opacity="0.25" stroke="none"/>"##, band.trim_end());
        let line: Vec<String> = pts.iter().map(|(it, m, _)| format!("{:.2},{:.2}", x(*it), y(*m))).collect();
        let _ = writeln!(svg, r##"<polyline points="{}" fill="none" stroke="#4c72b0" stroke-width="1.5"/>"##, line.join(" "));
        let _ = writeln!(svg, r#"<text x="4" y="{:.2}">{}</text>"#, y(hi) + 4.0, fmt_tick(hi));
        let _ = writeln!(svg, r#"<text x="4" y="{:.2}">{}</text>"#, y(lo), fmt_tick(lo));
        let _ = writeln!(svg, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, w - pad - 30.0, top + h - 10.0, max_it);
    }
    svg.push_str("</svg>\n");
    svg
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stderr_closed_forms() {
        assert_eq!(mean_stderr(&[]), None);
        assert_eq!(mean_stderr(&[0.7]), Some((0.7, 0.0)));
        // sample var of {0, 1} = 0.5, stderr = sqrt(0.5 / 2) = 0.5
        assert_eq!(mean_stderr(&[0.0, 1.0]), Some((0.5, 0.5)));
    }

    #[test]
    fn aggregate_aligns_by_iteration() {
        let mut a = MetricsTable::new();
        a.insert(0, vec![Some(1.0), Some(0.0), None, None, None, Some(0.0)]);
        a.insert(1, vec![Some(3.0), Some(1.0), Some(0.4), None, None, Some(1.0)]);
        let mut b = MetricsTable::new();
        b.insert(0, vec![Some(3.0), Some(1.0), None, None, None, Some(0.0)]);
        let agg = aggregate(&[a, b]);
        assert_eq!(agg.len(), 2);
        assert_eq!(agg[0].runs, 2);
        assert_eq!(agg[0].stats[0], Some((2.0, 1.0)));
        assert_eq!(agg[1].stats[2], Some((0.4, 0.0)));
        assert_eq!(agg[0].stats[2], None);
        let svg = render_svg(&agg);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }
}
