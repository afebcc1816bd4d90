use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Affect, Frame, MotionSequence, SkeletonTopology, AXES, NUM_JOINTS};
use crate::error::{Error, Result};

/// Labels stored next to a motion CSV (`walk.csv` → `walk.json`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub subject_id: String,
    pub affect: Affect,
    pub frame_rate: f64,
    pub skeleton: SkeletonTopology,
}

pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

fn parse_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

pub fn parse_motion_csv(path: &Path) -> Result<MotionSequence> {
    let side_path = sidecar_path(path);
    let side_text = fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
    let side: Sidecar = serde_json::from_str(&side_text).map_err(|e| Error::json(&side_path, e))?;
    side.skeleton.validate()?;

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| parse_err(path, e.to_string()))?;
    let header = reader
        .headers()
        .map_err(|e| parse_err(path, e.to_string()))?
        .clone();
    let find = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_err(path, format!("missing column {name}")))
    };
    find("frame")?;
    let mut cols = [[0usize; 3]; NUM_JOINTS];
    for (j, name) in side.skeleton.joint_names.iter().enumerate() {
        for (a, axis) in AXES.iter().enumerate() {
            cols[j][a] = find(&format!("{name}_{axis}"))?;
        }
    }

    let mut frames: Vec<Frame> = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| parse_err(path, format!("row {row}: {e}")))?;
        let mut frame = [[0.0; 3]; NUM_JOINTS];
        for j in 0..NUM_JOINTS {
            for a in 0..3 {
                let c = cols[j][a];
                let cell = record.get(c).ok_or_else(|| {
                    parse_err(path, format!("row {row}: missing cell {}", &header[c]))
                })?;
                frame[j][a] = cell.parse::<f64>().map_err(|_| {
                    parse_err(
                        path,
                        format!(
                            "row {row}: non-numeric value {cell:?} in column {}",
                            &header[c]
                        ),
                    )
                })?;
            }
        }
        frames.push(frame);
    }

    let seq = MotionSequence {
        id: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        subject_id: side.subject_id,
        affect: side.affect,
        frame_rate: side.frame_rate,
        frames,
    };
    seq.validate().map_err(|e| parse_err(path, e.to_string()))?;
    Ok(seq)
}

/// Writes the CSV and its sidecar. Values use the shortest representation
/// that parses back to the identical `f64`.
pub fn write_motion_csv(
    seq: &MotionSequence,
    skeleton: &SkeletonTopology,
    path: &Path,
) -> Result<()> {
    seq.validate()?;
    skeleton.validate()?;
    let mut out = String::with_capacity(seq.len() * NUM_JOINTS * 3 * 12);
    out.push_str("frame");
    for name in &skeleton.joint_names {
        for axis in AXES {
            out.push_str(&format!(",{name}_{axis}"));
        }
    }
    out.push('\n');
    for (t, f) in seq.frames.iter().enumerate() {
        out.push_str(&t.to_string());
        for v in f.iter().flatten() {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))?;

    let side = Sidecar {
        subject_id: seq.subject_id.clone(),
        affect: seq.affect,
        frame_rate: seq.frame_rate,
        skeleton: skeleton.clone(),
    };
    let side_path = sidecar_path(path);
    let text = serde_json::to_string_pretty(&side).map_err(|e| Error::json(&side_path, e))?;
    fs::write(&side_path, text).map_err(|e| Error::io(&side_path, e))
}
