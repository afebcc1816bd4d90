use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::RunLayout;
use crate::error::{Error, Result};
use crate::mocap::Affect;

/// Published per-class accuracy (mean, std over folds) of the five models on
/// the original motion-capture dataset, for context only.
pub const REFERENCE_ACCURACY: [(&str, [(f64, f64); 4]); 5] = [
    (
        "knn-man",
        [(79.71, 3.58), (68.42, 5.52), (75.41, 4.63), (88.17, 2.35)],
    ),
    (
        "svm-man",
        [(80.66, 3.61), (68.89, 5.59), (74.96, 6.38), (87.1, 1.83)],
    ),
    (
        "svm-xyz",
        [(87.03, 3.48), (69.62, 3.36), (76.2, 3.36), (85.19, 4.16)],
    ),
    (
        "cnn-xyz",
        [(88.4, 6.11), (68.77, 9.24), (83.62, 3.97), (87.74, 3.55)],
    ),
    (
        "ae-xyz",
        [(93.82, 2.34), (86.17, 3.99), (90.25, 2.89), (96.82, 2.06)],
    ),
];

fn read_table(path: &Path) -> Option<Vec<Vec<String>>> {
    let mut r = csv::Reader::from_path(path).ok()?;
    r.records()
        .map(|rec| rec.ok().map(|rec| rec.iter().map(str::to_string).collect()))
        .collect()
}

fn num(s: &str) -> f64 {
    s.parse().unwrap_or(f64::NAN)
}

fn gap(out: &mut String, what: &str, path: &Path) {
    let _ = writeln!(out, "_Missing: {what} (`{}` not found)._\n", path.display());
}

fn rel(root: &Path, p: &Path) -> String {
    p.strip_prefix(root).unwrap_or(p).display().to_string()
}

/// Writes `report.md` in a run directory from whatever outputs exist there.
/// Missing stages are flagged rather than treated as errors.
pub fn write_report(run_dir: &Path) -> Result<PathBuf> {
    if !run_dir.is_dir() {
        return Err(Error::invalid(format!(
            "run directory {} does not exist",
            run_dir.display()
        )));
    }
    let layout = RunLayout::new(run_dir);
    let classes: Vec<&str> = Affect::ALL.iter().map(|a| a.name()).collect();
    let mut out = String::from("# Run summary\n\n");

    out.push_str("## Affect classification\n\n");
    let summary_path = layout.eval().join("eval_summary.csv");
    match read_table(&summary_path) {
        Some(rows) => {
            let mut by_model: BTreeMap<String, BTreeMap<String, (f64, f64)>> = BTreeMap::new();
            let mut order = Vec::new();
            for r in &rows {
                if !by_model.contains_key(&r[0]) {
                    order.push(r[0].clone());
                }
                by_model
                    .entry(r[0].clone())
                    .or_default()
                    .insert(r[1].clone(), (num(&r[2]), num(&r[3])));
            }
            out.push_str("Accuracy per class in percent, mean ± std over folds.\n\n| Model |");
            for c in &classes {
                let _ = write!(out, " {c} |");
            }
            out.push_str(" Overall | Macro F1 |\n|---|");
            out.push_str(&"---|".repeat(classes.len() + 2));
            out.push('\n');
            for m in &order {
                let cells = &by_model[m];
                let _ = write!(out, "| {m} |");
                for key in classes.iter().copied().chain(["overall", "macro_f1"]) {
                    match cells.get(key) {
                        Some((mean, std)) => {
                            let _ = write!(out, " {mean:.2} ± {std:.2} |");
                        }
                        None => out.push_str(" n/a |"),
                    }
                }
                out.push('\n');
            }
            out.push('\n');
        }
        None => gap(&mut out, "affect benchmark", &summary_path),
    }

    out.push_str("### Reference: published accuracy, not reproduced (external dataset)\n\n");
    out.push_str("These values come from the original motion-capture study and are listed for context; this run uses synthetic data.\n\n| Model |");
    for c in &classes {
        let _ = write!(out, " {c} |");
    }
    out.push_str("\n|---|");
    out.push_str(&"---|".repeat(classes.len()));
    out.push('\n');
    for (m, vals) in REFERENCE_ACCURACY {
        let _ = write!(out, "| {m} |");
        for (mean, std) in vals {
            let _ = write!(out, " {mean:.2} ± {std:.2} |");
        }
        out.push('\n');
    }
    out.push('\n');

    out.push_str("## Privacy\n\nSubject identification accuracy in percent.\n\n");
    let privacy_path = layout.privacy().join("privacy.csv");
    match read_table(&privacy_path) {
        Some(rows) => {
            out.push_str("| Classifier | Mean | Std |\n|---|---|---|\n");
            for r in &rows {
                let _ = writeln!(out, "| {} | {:.2} | {:.2} |", r[0], num(&r[1]), num(&r[2]));
            }
            out.push('\n');
        }
        None => gap(&mut out, "privacy evaluation", &privacy_path),
    }

    out.push_str("## Latent space\n\n");
    let sil_path = layout.eval().join("silhouette.csv");
    match read_table(&sil_path) {
        Some(rows) => {
            out.push_str("| Code | Labels | Silhouette |\n|---|---|---|\n");
            for r in &rows {
                let _ = writeln!(out, "| {} | {} | {:.4} |", r[0], r[1], num(&r[2]));
            }
            let _ = writeln!(
                out,
                "\n2-D projections: `{}`.\n",
                rel(run_dir, &layout.eval().join("latent_pca.csv"))
            );
        }
        None => gap(&mut out, "latent statistics", &sil_path),
    }

    out.push_str("## Attributions\n\n");
    let joints_path = layout.explain().join("attribution_joints.csv");
    match read_table(&joints_path) {
        Some(rows) => {
            let mut per_class: BTreeMap<String, Vec<(String, f64)>> = BTreeMap::new();
            for r in &rows {
                per_class
                    .entry(r[0].clone())
                    .or_default()
                    .push((r[1].clone(), num(&r[3])));
            }
            out.push_str(
                "Largest joint contributions per class (percent of total attribution).\n\n",
            );
            for c in &classes {
                let Some(js) = per_class.get_mut(*c) else {
                    continue;
                };
                js.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                let top: Vec<String> = js
                    .iter()
                    .take(5)
                    .map(|(j, p)| format!("{j} {p:.1}"))
                    .collect();
                let _ = writeln!(out, "- {c}: {}", top.join(", "));
            }
            let _ = writeln!(
                out,
                "\n![joint contributions]({})\n",
                rel(run_dir, &layout.explain().join("attribution_joints.svg"))
            );
            for c in &classes {
                let svg = layout.explain().join(format!("attribution_curves_{c}.svg"));
                if svg.exists() {
                    let _ = writeln!(out, "![{c} curves]({})", rel(run_dir, &svg));
                }
            }
            out.push('\n');
        }
        None => gap(&mut out, "attribution report", &joints_path),
    }

    out.push_str("## Training\n\n");
    let losses = super::losses_path(&layout.checkpoint());
    match read_table(&losses) {
        Some(rows) if !rows.is_empty() => {
            let last = rows.last().expect("non-empty");
            let _ = writeln!(
                out,
                "{} epochs; final losses: rec {:.5}, cross {:.5}, triplet-s {:.5}, triplet-a {:.5}, total {:.5}.\n",
                rows.len(),
                num(&last[1]),
                num(&last[2]),
                num(&last[3]),
                num(&last[4]),
                num(&last[5])
            );
        }
        _ => gap(&mut out, "training log", &losses),
    }

    let path = layout.report();
    fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
