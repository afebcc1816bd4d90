use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{parse_motion_csv, Affect, MotionSequence, SkeletonTopology};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Relative paths resolve against the manifest's directory.
    pub file: PathBuf,
    pub subject_id: String,
    pub affect: Affect,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub skeleton: SkeletonTopology,
    #[serde(default)]
    pub provenance: String,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        m.skeleton.validate()?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.file.is_absolute() {
            entry.file.clone()
        } else {
            self.base_dir.join(&entry.file)
        }
    }

    pub fn subjects(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.entries.iter().map(|e| e.subject_id.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    /// Errors unless every subject has at least one entry for every affect.
    pub fn check_complete(&self) -> Result<()> {
        let have: BTreeSet<(&str, Affect)> = self
            .entries
            .iter()
            .map(|e| (e.subject_id.as_str(), e.affect))
            .collect();
        let missing: Vec<String> = self
            .subjects()
            .iter()
            .flat_map(|s| Affect::ALL.into_iter().map(move |a| (s.clone(), a)))
            .filter(|(s, a)| !have.contains(&(s.as_str(), *a)))
            .map(|(s, a)| format!("{s}/{a}"))
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "manifest lacks (subject, affect) pairs: {}",
                missing.join(", ")
            )))
        }
    }

    /// Loads every entry. Labels in the manifest must agree with the sidecars.
    pub fn load_sequences(&self) -> Result<Vec<MotionSequence>> {
        let paths: Vec<PathBuf> = self.entries.iter().map(|e| self.resolve(e)).collect();
        let seqs = crate::parallel::try_map(&paths, |p| parse_motion_csv(p))?;
        for (e, s) in self.entries.iter().zip(&seqs) {
            if e.subject_id != s.subject_id || e.affect != s.affect {
                return Err(Error::invalid(format!(
                    "manifest labels {}/{} disagree with sidecar {}/{} for {}",
                    e.subject_id,
                    e.affect,
                    s.subject_id,
                    s.affect,
                    e.file.display()
                )));
            }
        }
        Ok(seqs)
    }
}
