use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::explain::{AttributionMap, GlobalAttributionReport};
use crate::mocap::AXES;

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Internal(format!("writing {}: {other:?}", path.display())),
    }
}

fn write_rows(
    path: &Path,
    header: &[&str],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

const PALETTE: [&str; 6] = [
    "#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02",
];

/// Grouped bars: one group per joint, one bar per class.
fn bar_chart(report: &GlobalAttributionReport) -> String {
    let (w, h, left, bottom, top) = (900.0, 360.0, 50.0, 70.0, 30.0);
    let n_j = report.joint_names.len();
    let n_c = report.classes.len().max(1);
    let max = report
        .classes
        .iter()
        .flat_map(|c| c.joint_pct.iter().copied())
        .fold(1e-9, f64::max);
    let plot_h = h - bottom - top;
    let slot = (w - left - 10.0) / n_j as f64;
    let bar = slot * 0.8 / n_c as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{left}" y="18">Joint contribution (%)</text>"#
    );
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{y}" x2="{x2}" y2="{y}" stroke="black"/>"#,
        y = h - bottom,
        x2 = w - 10.0
    );
    for (j, name) in report.joint_names.iter().enumerate() {
        let x0 = left + j as f64 * slot + slot * 0.1;
        for (k, c) in report.classes.iter().enumerate() {
            let v = c.joint_pct[j];
            let bh = plot_h * v / max;
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                x0 + k as f64 * bar,
                h - bottom - bh,
                bar,
                bh,
                PALETTE[k % PALETTE.len()]
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" transform="rotate(45 {:.2} {:.2})">{}</text>"#,
            x0,
            h - bottom + 14.0,
            x0,
            h - bottom + 14.0,
            esc(name)
        );
    }
    for (k, name) in report.class_names.iter().enumerate() {
        let x = w - 120.0;
        let y = top + 14.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/>"#,
            y - 9.0,
            PALETTE[k % PALETTE.len()]
        );
        let _ = writeln!(s, r#"<text x="{}" y="{y}">{}</text>"#, x + 14.0, esc(name));
    }
    s.push_str("</svg>\n");
    s
}

/// One line per retained (group, axis) curve of a class.
fn line_chart(report: &GlobalAttributionReport, class: usize) -> String {
    let (w, h, left, bottom, top) = (640.0, 320.0, 50.0, 40.0, 30.0);
    let c = &report.classes[class];
    let max = c
        .curves
        .iter()
        .flat_map(|g| g.all.iter().copied())
        .fold(1e-9, f64::max);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{left}" y="18">{} - attribution over the gait cycle</text>"#,
        esc(&report.class_names[class])
    );
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{y}" x2="{x2}" y2="{y}" stroke="black"/>"#,
        y = h - bottom,
        x2 = w - 130.0
    );
    let plot_w = w - left - 130.0;
    let plot_h = h - bottom - top;
    for (k, g) in c.curves.iter().enumerate() {
        let n = g.all.len().max(2);
        let points: Vec<String> = g
            .all
            .iter()
            .enumerate()
            .map(|(t, v)| {
                format!(
                    "{:.2},{:.2}",
                    left + plot_w * t as f64 / (n - 1) as f64,
                    h - bottom - plot_h * v / max
                )
            })
            .collect();
        let color = PALETTE[k % PALETTE.len()];
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" points="{}"/>"#,
            points.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{} {}</text>"#,
            w - 120.0,
            top + 14.0 * k as f64,
            g.group.name(),
            g.axis_name()
        );
    }
    s.push_str("</svg>\n");
    s
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

/// Writes `attribution_joints.csv`, `attribution_curves.csv`, a bar chart
/// and one curve chart per class. Returns the written paths.
pub fn emit_attribution_report(
    report: &GlobalAttributionReport,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();

    let path = out_dir.join("attribution_joints.csv");
    let rows = report.classes.iter().flat_map(|c| {
        report.joint_names.iter().enumerate().map(move |(j, name)| {
            vec![
                report.class_names[c.class].clone(),
                name.clone(),
                c.joint_mean[j].to_string(),
                c.joint_pct[j].to_string(),
                c.joint_pct_correct[j].to_string(),
                c.joint_pct_incorrect[j].to_string(),
            ]
        })
    });
    write_rows(
        &path,
        &[
            "class",
            "joint",
            "mean",
            "pct",
            "pct_correct",
            "pct_incorrect",
        ],
        rows,
    )?;
    written.push(path);

    let path = out_dir.join("attribution_curves.csv");
    let rows = report.classes.iter().flat_map(|c| {
        c.curves.iter().flat_map(move |g| {
            (0..g.all.len()).map(move |t| {
                vec![
                    report.class_names[c.class].clone(),
                    g.group.name().to_string(),
                    AXES[g.axis].to_string(),
                    t.to_string(),
                    g.all[t].to_string(),
                    g.correct[t].to_string(),
                ]
            })
        })
    });
    write_rows(
        &path,
        &["class", "group", "axis", "frame", "all", "correct"],
        rows,
    )?;
    written.push(path);

    let path = out_dir.join("attribution_joints.svg");
    write_text(&path, &bar_chart(report))?;
    written.push(path);
    for c in &report.classes {
        let path = out_dir.join(format!(
            "attribution_curves_{}.svg",
            file_stem(&report.class_names[c.class])
        ));
        write_text(&path, &line_chart(report, c.class))?;
        written.push(path);
    }
    Ok(written)
}

/// One long-format CSV of per-sample maps: sample, frame, signal, value.
pub fn write_attribution_maps(
    maps: &[AttributionMap],
    signal_names: &[String],
    path: &Path,
) -> Result<()> {
    let rows = maps.iter().enumerate().flat_map(|(i, m)| {
        (0..m.frames()).flat_map(move |t| {
            (0..m.signals()).map(move |s| {
                vec![
                    i.to_string(),
                    m.truth.to_string(),
                    m.predicted.to_string(),
                    t.to_string(),
                    signal_names
                        .get(s)
                        .cloned()
                        .unwrap_or_else(|| s.to_string()),
                    m.at(t, s).to_string(),
                ]
            })
        })
    });
    write_rows(
        path,
        &["sample", "truth", "predicted", "frame", "signal", "value"],
        rows,
    )
}
