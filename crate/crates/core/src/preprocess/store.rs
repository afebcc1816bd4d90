//! On-disk cycle sets: `index.json` plus, per cycle, `<id>.csv` (the
//! z-scored tensor, one row per frame) and `<id>.geom.csv` (the geometry
//! before limb rescaling, in meters).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CycleSource, GaitCycle, NormRecord, Preprocessed, SsaParams, CYCLE_LEN};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::mocap::{Affect, Frame, SkeletonTopology, NUM_JOINTS, NUM_SIGNALS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CycleIndexEntry {
    pub id: String,
    pub file: String,
    pub geometry_file: String,
    pub subject_id: String,
    pub affect: Affect,
    pub source: CycleSource,
    pub norm: NormRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CycleIndex {
    pub skeleton: SkeletonTopology,
    pub ssa: SsaParams,
    pub limb_means: Vec<f64>,
    pub cycles: Vec<CycleIndexEntry>,
}

pub struct CycleSet {
    pub skeleton: SkeletonTopology,
    pub ssa: SsaParams,
    pub limb_means: Vec<f64>,
    pub cycles: Vec<GaitCycle>,
}

fn header(skeleton: &SkeletonTopology) -> String {
    let mut h = String::from("frame");
    for s in 0..NUM_SIGNALS {
        h.push(',');
        h.push_str(&skeleton.signal_name(s));
    }
    h.push('\n');
    h
}

fn rows(skeleton: &SkeletonTopology, frames: usize, value: impl Fn(usize, usize) -> f64) -> String {
    let mut out = header(skeleton);
    for t in 0..frames {
        out.push_str(&t.to_string());
        for s in 0..NUM_SIGNALS {
            out.push(',');
            out.push_str(&value(t, s).to_string());
        }
        out.push('\n');
    }
    out
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_cycles(
    dir: &Path,
    prep: &Preprocessed,
    skeleton: &SkeletonTopology,
    ssa: &SsaParams,
) -> Result<CycleIndex> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(prep.cycles.len());
    for c in &prep.cycles {
        let id = c.id();
        let file = format!("{id}.csv");
        let geometry_file = format!("{id}.geom.csv");
        let t = c.tensor.data();
        write(
            &dir.join(&file),
            &rows(skeleton, CYCLE_LEN, |f, s| t[s * CYCLE_LEN + f]),
        )?;
        write(
            &dir.join(&geometry_file),
            &rows(skeleton, c.geometry.len(), |f, s| {
                c.geometry[f][s / 3][s % 3]
            }),
        )?;
        entries.push(CycleIndexEntry {
            id,
            file,
            geometry_file,
            subject_id: c.subject_id.clone(),
            affect: c.affect,
            source: c.source.clone(),
            norm: c.norm,
        });
    }
    let index = CycleIndex {
        skeleton: skeleton.clone(),
        ssa: *ssa,
        limb_means: prep.limb_means.clone(),
        cycles: entries,
    };
    let path = dir.join("index.json");
    let text = serde_json::to_string_pretty(&index).map_err(|e| Error::json(&path, e))?;
    write(&path, &text)?;
    Ok(index)
}

fn read_rows(path: &Path, skeleton: &SkeletonTopology) -> Result<Vec<[f64; NUM_SIGNALS]>> {
    let perr = |msg: String| Error::Parse {
        path: path.to_path_buf(),
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| perr(e.to_string()))?;
    let hdr = reader.headers().map_err(|e| perr(e.to_string()))?.clone();
    for s in 0..NUM_SIGNALS {
        let name = skeleton.signal_name(s);
        if hdr.get(s + 1) != Some(name.as_str()) {
            return Err(perr(format!("missing column {name}")));
        }
    }
    let mut out = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| perr(format!("row {}: {e}", r + 1)))?;
        let mut row = [0.0; NUM_SIGNALS];
        for (s, v) in row.iter_mut().enumerate() {
            let cell = rec.get(s + 1).unwrap_or("");
            *v = cell
                .parse()
                .map_err(|_| perr(format!("row {}: non-numeric value {cell:?}", r + 1)))?;
        }
        out.push(row);
    }
    Ok(out)
}

pub fn read_cycles(dir: &Path) -> Result<CycleSet> {
    let path = dir.join("index.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: CycleIndex = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    index.skeleton.validate()?;
    let skeleton = &index.skeleton;
    let cycles = crate::parallel::try_map(&index.cycles, |e| {
        let file: PathBuf = dir.join(&e.file);
        let t = read_rows(&file, skeleton)?;
        if t.len() != CYCLE_LEN {
            return Err(Error::Parse {
                path: file,
                msg: format!("expected {CYCLE_LEN} frames, found {}", t.len()),
            });
        }
        let mut data = vec![0.0; NUM_SIGNALS * CYCLE_LEN];
        for (f, row) in t.iter().enumerate() {
            for (s, v) in row.iter().enumerate() {
                data[s * CYCLE_LEN + f] = *v;
            }
        }
        let geometry: Vec<Frame> = read_rows(&dir.join(&e.geometry_file), skeleton)?
            .into_iter()
            .map(|row| {
                let mut f = [[0.0; 3]; NUM_JOINTS];
                for (s, v) in row.iter().enumerate() {
                    f[s / 3][s % 3] = *v;
                }
                f
            })
            .collect();
        Ok(GaitCycle {
            subject_id: e.subject_id.clone(),
            affect: e.affect,
            source: e.source.clone(),
            geometry,
            tensor: Tensor::new(vec![NUM_SIGNALS, CYCLE_LEN], data)?,
            norm: e.norm,
        })
    })?;
    Ok(CycleSet {
        skeleton: index.skeleton.clone(),
        ssa: index.ssa,
        limb_means: index.limb_means,
        cycles,
    })
}
