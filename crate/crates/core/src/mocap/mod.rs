//! Motion sequences, their CSV/JSON file formats and a synthetic gait source.

mod csv_io;
mod manifest;
mod skeleton;
mod synth;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use csv_io::{parse_motion_csv, sidecar_path, write_motion_csv, Sidecar};
pub use manifest::{DatasetManifest, ManifestEntry};
pub use skeleton::{joint, SkeletonTopology, AXES, JOINT_NAMES, NUM_JOINTS, NUM_SIGNALS};
pub use synth::{
    synth_generate, AffectParams, AffectTable, SubjectParams, SubjectRanges, SynthConfig,
    SynthDataset, Synthesizer,
};

pub type Frame = [[f64; 3]; NUM_JOINTS];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Affect {
    Angry,
    Happy,
    Neutral,
    Sad,
}

impl Affect {
    pub const ALL: [Affect; 4] = [Affect::Angry, Affect::Happy, Affect::Neutral, Affect::Sad];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::invalid(format!("affect index {i} outside 0..4")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Affect::Angry => "angry",
            Affect::Happy => "happy",
            Affect::Neutral => "neutral",
            Affect::Sad => "sad",
        }
    }
}

impl fmt::Display for Affect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Affect {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown affect {s:?}")))
    }
}

/// A T×15×3 joint trajectory (meters, z up) with its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    pub id: String,
    pub subject_id: String,
    pub affect: Affect,
    pub frame_rate: f64,
    pub frames: Vec<Frame>,
}

impl MotionSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.len() < 2 {
            return Err(Error::invalid(format!(
                "sequence {} has {} frames, need at least 2",
                self.id,
                self.frames.len()
            )));
        }
        if !(self.frame_rate.is_finite() && self.frame_rate > 0.0) {
            return Err(Error::invalid(format!(
                "sequence {} has frame rate {}",
                self.id, self.frame_rate
            )));
        }
        for (t, f) in self.frames.iter().enumerate() {
            if f.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("sequence {} frame {t}", self.id)));
            }
        }
        Ok(())
    }

    /// Trajectory of one joint.
    pub fn joint_track(&self, j: usize) -> Vec<[f64; 3]> {
        self.frames.iter().map(|f| f[j]).collect()
    }
}
