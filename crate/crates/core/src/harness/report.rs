//! Plots and summary tables from `results.jsonl`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use super::{read_results, ResultRow, RESULTS_FILE};
use crate::error::{Error, Result};
use crate::labels::LabelMode;
use crate::model::write_atomic;
use crate::transfer::recover_rate;

/// Median accuracy against one swept parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityCurve {
    pub param: &'static str,
    pub points: Vec<(f64, f64)>,
    /// Index of the best point.
    pub best: usize,
    /// Best point is neither the smallest nor the largest value.
    pub interior: bool,
}

#[derive(Clone, Debug)]
pub struct ReportOutputs {
    pub files: Vec<PathBuf>,
    pub summary: String,
    pub sensitivity: Vec<SensitivityCurve>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn plot_err<E: std::fmt::Debug>(e: E) -> Error {
    Error::Plot(format!("{e:?}"))
}

/// Key for grouping floats that came out of a config file.
fn key(v: f64) -> i64 {
    (v * 1e9).round() as i64
}

fn mode_of<'a>(rows: impl Iterator<Item = &'a ResultRow>) -> Option<LabelMode> {
    let mut counts: BTreeMap<u8, (usize, LabelMode)> = BTreeMap::new();
    for r in rows {
        counts.entry(r.mode.code()).or_insert((0, r.mode)).0 += 1;
    }
    counts.values().max_by_key(|(n, m)| (*n, std::cmp::Reverse(m.code()))).map(|&(_, m)| m)
}

fn most_common(values: impl Iterator<Item = f64>) -> Option<f64> {
    let mut counts: BTreeMap<i64, (usize, f64)> = BTreeMap::new();
    for v in values {
        counts.entry(key(v)).or_insert((0, v)).0 += 1;
    }
    counts.values().max_by_key(|(n, _)| *n).map(|&(_, v)| v)
}

/// Accuracy curve over `param`, holding the other parameter at its most
/// common value and using the most common variant and mode.
pub fn sensitivity(rows: &[ResultRow], param: &'static str) -> Option<SensitivityCurve> {
    let variant = {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for r in rows {
            *counts.entry(r.variant.as_str()).or_default() += 1;
        }
        counts.into_iter().max_by_key(|(_, n)| *n)?.0.to_string()
    };
    let pool: Vec<&ResultRow> = rows.iter().filter(|r| r.variant == variant).collect();
    let mode = mode_of(pool.iter().copied())?;
    let pool: Vec<&ResultRow> = pool.into_iter().filter(|r| r.mode == mode).collect();
    let (get, other): (fn(&ResultRow) -> f64, fn(&ResultRow) -> f64) = match param {
        "epsilon" => (|r| r.epsilon, |r| r.r),
        "r" => (|r| r.r, |r| r.epsilon),
        _ => return None,
    };
    let fixed = most_common(pool.iter().map(|r| other(r)))?;
    let mut groups: BTreeMap<i64, (f64, Vec<f64>)> = BTreeMap::new();
    for r in pool.iter().filter(|r| key(other(r)) == key(fixed)) {
        groups.entry(key(get(r))).or_insert((get(r), vec![])).1.push(r.accuracy);
    }
    if groups.len() < 2 {
        return None;
    }
    let points: Vec<(f64, f64)> = groups.values().map(|(x, acc)| (*x, median(acc))).collect();
    let best = (0..points.len()).max_by(|&a, &b| points[a].1.total_cmp(&points[b].1).then(b.cmp(&a)))?;
    Some(SensitivityCurve { param, interior: best > 0 && best + 1 < points.len(), points, best })
}

fn padded(lo: f64, hi: f64) -> std::ops::Range<f64> {
    let span = (hi - lo).abs().max(1e-3);
    (lo - 0.1 * span)..(hi + 0.1 * span)
}

fn accuracy_vs_ipc(rows: &[ResultRow], path: &Path) -> Result<()> {
    let mut series: BTreeMap<String, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for r in rows {
        series.entry(format!("{} / {}", r.variant, r.mode)).or_default().entry(r.ipc).or_default().push(r.accuracy);
    }
    let ipcs: Vec<usize> = rows.iter().map(|r| r.ipc).collect();
    let (lo, hi) = (*ipcs.iter().min().unwrap() as f64, *ipcs.iter().max().unwrap() as f64);
    let accs: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
    let (alo, ahi) = accs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Student accuracy vs images per class", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(52)
        .build_cartesian_2d(padded(lo, hi), padded(alo, ahi))
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("IPC").y_desc("median accuracy").draw().map_err(plot_err)?;
    for (i, (name, by_ipc)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let pts: Vec<(f64, f64)> = by_ipc.iter().map(|(&k, v)| (k as f64, median(v))).collect();
        chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        chart.draw_series(pts.iter().map(|&p| Circle::new(p, 4, color.filled()))).map_err(plot_err)?;
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(plot_err)?;
    root.present().map_err(plot_err)
}

fn storage_bars(rows: &[ResultRow], path: &Path) -> Result<()> {
    let mut by_mode: BTreeMap<u8, (LabelMode, Vec<f64>)> = BTreeMap::new();
    for r in rows {
        by_mode.entry(r.mode.code()).or_insert((r.mode, vec![])).1.push(r.store_bytes as f64);
    }
    let bars: Vec<(LabelMode, f64)> = by_mode.values().map(|(m, v)| (*m, median(v))).collect();
    let top = bars.iter().map(|b| b.1).fold(1.0, f64::max) * 1.15;
    let root = SVGBackend::new(path, (560, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let n = bars.len();
    let mut chart = ChartBuilder::on(&root)
        .caption("Label store size", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(64)
        .build_cartesian_2d(0f64..n as f64, 0f64..top)
        .map_err(plot_err)?;
    let names: Vec<String> = bars.iter().map(|b| b.0.to_string()).collect();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(n.max(1) * 2 + 1)
        .x_label_formatter(&|x| {
            let i = x.floor() as usize;
            if (x - i as f64 - 0.5).abs() < 1e-6 && i < names.len() {
                names[i].clone()
            } else {
                String::new()
            }
        })
        .y_desc("bytes")
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(bars.iter().enumerate().map(|(i, &(_, b))| {
            Rectangle::new([(i as f64 + 0.15, 0.0), (i as f64 + 0.85, b)], Palette99::pick(i).filled())
        }))
        .map_err(plot_err)?;
    chart
        .draw_series(bars.iter().enumerate().map(|(i, &(_, b))| {
            Text::new(format!("{b:.0}"), (i as f64 + 0.3, b + top * 0.03), ("sans-serif", 14))
        }))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

fn sensitivity_plot(curve: &SensitivityCurve, path: &Path) -> Result<()> {
    let xs: Vec<f64> = curve.points.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = curve.points.iter().map(|p| p.1).collect();
    let (xlo, xhi) = (xs[0], xs[xs.len() - 1]);
    let (ylo, yhi) = ys.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("Sensitivity to {}", curve.param), ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(52)
        .build_cartesian_2d(padded(xlo, xhi), padded(ylo, yhi))
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc(curve.param).y_desc("median accuracy").draw().map_err(plot_err)?;
    chart.draw_series(LineSeries::new(curve.points.clone(), BLUE.stroke_width(2))).map_err(plot_err)?;
    chart.draw_series(curve.points.iter().map(|&p| Circle::new(p, 4, BLUE.filled()))).map_err(plot_err)?;
    let best = curve.points[curve.best];
    chart.draw_series(std::iter::once(Circle::new(best, 8, RED.stroke_width(3)))).map_err(plot_err)?;
    let tag = if curve.interior { "best (interior)" } else { "best" };
    chart
        .draw_series(std::iter::once(Text::new(
            format!("{tag}: {} = {}, {:.4}", curve.param, best.0, best.1),
            best,
            ("sans-serif", 14).into_font().color(&RED),
        )))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

fn markdown_table(out: &mut String, header: &[&str], rows: &[Vec<String>]) {
    let _ = writeln!(out, "| {} |", header.join(" | "));
    let _ = writeln!(out, "|{}|", header.iter().map(|_| "---").collect::<Vec<_>>().join("|"));
    for r in rows {
        let _ = writeln!(out, "| {} |", r.join(" | "));
    }
}

fn summary_text(rows: &[ResultRow], curves: &[SensitivityCurve]) -> String {
    let mut out = String::from("# Results\n\n");
    let cells: Vec<Vec<String>> = rows.iter().map(|r| r.cells().to_vec()).collect();
    markdown_table(&mut out, &ResultRow::COLUMNS, &cells);

    out.push_str("\n## Label modes (median accuracy over seeds)\n\n");
    let mut groups: BTreeMap<(String, usize), BTreeMap<u8, Vec<f64>>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.variant.clone(), r.ipc)).or_default().entry(r.mode.code()).or_default().push(r.accuracy);
    }
    let mut table = Vec::new();
    for ((variant, ipc), by_mode) in &groups {
        let med = |m: LabelMode| by_mode.get(&m.code()).map(|v| median(v));
        let cell = |m: LabelMode| med(m).map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        let rr = match (med(LabelMode::Dbr), med(LabelMode::Oh), med(LabelMode::Sl)) {
            (Some(d), Some(o), Some(s)) => recover_rate(d, o, s).map_or("-".into(), |v| format!("{v:.3}")),
            _ => "-".into(),
        };
        let mut row = vec![variant.clone(), ipc.to_string()];
        row.extend(LabelMode::ALL.iter().map(|&m| cell(m)));
        row.push(rr);
        table.push(row);
    }
    markdown_table(&mut out, &["variant", "ipc", "dbr", "sl", "cl", "oh", "recover_rate"], &table);

    for c in curves {
        let _ = writeln!(out, "\n## Sensitivity to {}\n", c.param);
        let rows: Vec<Vec<String>> = c
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| vec![format!("{}", p.0), format!("{:.4}", p.1), if i == c.best { "*".into() } else { String::new() }])
            .collect();
        markdown_table(&mut out, &[c.param, "median accuracy", "best"], &rows);
    }
    out
}

/// Reads `<dir>/results.jsonl`, writes plots and `summary.md` to `<dir>/report`.
pub fn cmd_report(results_dir: &Path) -> Result<ReportOutputs> {
    let path = results_dir.join(RESULTS_FILE);
    let rows = read_results(&path)?;
    if rows.is_empty() {
        return Err(Error::MissingArtifact(path));
    }
    let out = results_dir.join("report");
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut files = vec![out.join("accuracy_vs_ipc.svg"), out.join("storage_bytes.svg")];
    accuracy_vs_ipc(&rows, &files[0])?;
    storage_bars(&rows, &files[1])?;
    let curves: Vec<SensitivityCurve> = ["epsilon", "r"].into_iter().filter_map(|p| sensitivity(&rows, p)).collect();
    for c in &curves {
        let f = out.join(format!("sensitivity_{}.svg", c.param));
        sensitivity_plot(c, &f)?;
        files.push(f);
    }
    let summary = summary_text(&rows, &curves);
    let sp = out.join("summary.md");
    write_atomic(&sp, summary.as_bytes())?;
    files.push(sp);
    Ok(ReportOutputs { files, summary, sensitivity: curves })
}
