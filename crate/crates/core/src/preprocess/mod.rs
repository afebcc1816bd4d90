//! Raw sequences → normalized fixed-length gait cycles.
//!
//! Per sequence: heel strikes → cycles → root at origin → heading removed →
//! resampled to [`CYCLE_LEN`] frames. Limb lengths are then rescaled to means
//! fitted on the training split and each cycle is z-scored as a whole.

mod geometry;
mod ssa;
mod store;
mod strikes;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::mocap::{
    Affect, DatasetManifest, Frame, MotionSequence, SkeletonTopology, NUM_JOINTS, NUM_SIGNALS,
};

pub use geometry::{
    limb_lengths, mean_limb_lengths, normalize_bones, remove_displacement, remove_rotation,
    resample_cycle, MAX_HIP_TILT,
};
pub use ssa::{ssa_smooth, SsaParams};
pub use store::{read_cycles, write_cycles, CycleIndex, CycleIndexEntry, CycleSet};
pub use strikes::{
    acceleration_magnitude, detect_heel_strikes, find_minima, segment_cycles, CycleSource,
    RawCycle, MIN_PROMINENCE, MIN_SEPARATION_S,
};

pub const CYCLE_LEN: usize = 128;
pub const ZSCORE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormRecord {
    pub mean: f64,
    pub std: f64,
}

/// One normalized cycle.
#[derive(Clone, Debug, PartialEq)]
pub struct GaitCycle {
    pub subject_id: String,
    pub affect: Affect,
    pub source: CycleSource,
    /// Root-relative, heading-free, resampled frames before limb rescaling.
    pub geometry: Vec<Frame>,
    /// z-scored [45, 128] model input (signal = joint·3 + axis).
    pub tensor: Tensor,
    pub norm: NormRecord,
}

impl GaitCycle {
    pub fn id(&self) -> String {
        format!("{}_{:05}", self.source.sequence_id, self.source.start)
    }

    pub fn bone_normalized(
        &self,
        skeleton: &SkeletonTopology,
        limb_means: &[f64],
    ) -> Result<Vec<Frame>> {
        normalize_bones(&self.geometry, skeleton, limb_means)
    }

    /// Rebuilds the tensor from the stored geometry with other limb means.
    pub fn renormalize(&mut self, skeleton: &SkeletonTopology, limb_means: &[f64]) -> Result<()> {
        let (tensor, norm) = zscore(&frames_to_tensor(
            &self.bone_normalized(skeleton, limb_means)?,
        ));
        self.tensor = tensor;
        self.norm = norm;
        Ok(())
    }
}

/// Frames (T×15×3) → channels-first [45, T].
pub fn frames_to_tensor(frames: &[Frame]) -> Tensor {
    let t = frames.len();
    let mut data = vec![0.0; NUM_SIGNALS * t];
    for (ti, f) in frames.iter().enumerate() {
        for j in 0..NUM_JOINTS {
            for k in 0..3 {
                data[(j * 3 + k) * t + ti] = f[j][k];
            }
        }
    }
    Tensor::new(vec![NUM_SIGNALS, t], data).expect("shape matches by construction")
}

/// Removes the scalar mean and divides by the scalar (population) std of
/// the whole tensor.
pub fn zscore(t: &Tensor) -> (Tensor, NormRecord) {
    let n = t.len() as f64;
    let mean = t.data().iter().sum::<f64>() / n;
    let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(ZSCORE_EPS);
    (t.map(|v| (v - mean) / std), NormRecord { mean, std })
}

/// Which cycles the limb-length means are fitted on.
#[derive(Clone, Debug, PartialEq)]
pub enum Split {
    All,
    /// Only cycles from these sequence ids.
    Sequences(BTreeSet<String>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Preprocessed {
    pub cycles: Vec<GaitCycle>,
    pub limb_means: Vec<f64>,
}

/// Strikes, segmentation, displacement, rotation and resampling for one
/// sequence. The returned cycles carry geometry only.
pub fn cycle_geometry(
    seq: &MotionSequence,
    skeleton: &SkeletonTopology,
    ssa: &SsaParams,
) -> Result<Vec<RawCycle>> {
    seq.validate()?;
    let strikes = detect_heel_strikes(seq, skeleton.right_ankle, ssa)?;
    segment_cycles(seq, &strikes)
        .into_iter()
        .filter(|c| c.frames.len() >= 2)
        .map(|c| normalize_raw_cycle(c, skeleton))
        .collect()
}

/// Displacement removal, rotation removal and resampling of a raw cycle.
pub fn normalize_raw_cycle(mut c: RawCycle, skeleton: &SkeletonTopology) -> Result<RawCycle> {
    let frames = remove_displacement(&c.frames, skeleton.root);
    let frames = remove_rotation(&frames, skeleton).map_err(|e| match e {
        Error::DegeneratePose { frame, msg } => Error::DegeneratePose {
            frame: frame + c.source.start,
            msg: format!("{}: {msg}", c.source.sequence_id),
        },
        e => e,
    })?;
    c.frames = resample_cycle(&frames, CYCLE_LEN)?;
    Ok(c)
}

/// Limb rescaling and z-scoring of a geometry-only cycle.
pub fn finalize_cycle(
    c: RawCycle,
    skeleton: &SkeletonTopology,
    limb_means: &[f64],
) -> Result<GaitCycle> {
    let scaled = normalize_bones(&c.frames, skeleton, limb_means)?;
    let (tensor, norm) = zscore(&frames_to_tensor(&scaled));
    Ok(GaitCycle {
        subject_id: c.subject_id,
        affect: c.affect,
        source: c.source,
        geometry: c.frames,
        tensor,
        norm,
    })
}

pub fn preprocess_sequences(
    seqs: &[MotionSequence],
    skeleton: &SkeletonTopology,
    ssa: &SsaParams,
    split: &Split,
) -> Result<Preprocessed> {
    skeleton.validate()?;
    let results = crate::parallel::map(seqs, |s| cycle_geometry(s, skeleton, ssa));
    let mut failures = Vec::new();
    let mut geoms = Vec::new();
    for (s, r) in seqs.iter().zip(results) {
        match r {
            Ok(c) => geoms.extend(c),
            Err(e) => failures.push(format!("{}: {e}", s.id)),
        }
    }
    if !failures.is_empty() {
        return Err(Error::Preprocess {
            count: failures.len(),
            details: failures.join("; "),
        });
    }
    if geoms.is_empty() {
        return Ok(Preprocessed {
            cycles: Vec::new(),
            limb_means: Vec::new(),
        });
    }
    let train = geoms.iter().filter(|c| match split {
        Split::All => true,
        Split::Sequences(ids) => ids.contains(&c.source.sequence_id),
    });
    let limb_means = mean_limb_lengths(train.map(|c| c.frames.as_slice()), skeleton)?;
    let cycles =
        crate::parallel::try_map(&geoms, |c| finalize_cycle(c.clone(), skeleton, &limb_means))?;
    Ok(Preprocessed { cycles, limb_means })
}

pub fn preprocess_pipeline(
    manifest: &DatasetManifest,
    ssa: &SsaParams,
    split: &Split,
) -> Result<Preprocessed> {
    let seqs = manifest.load_sequences()?;
    preprocess_sequences(&seqs, &manifest.skeleton, ssa, split)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zscore_moments_and_affine_invariance() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 4.0, -2.0, 0.5, 3.0, 9.0]).unwrap();
        let (z, rec) = zscore(&t);
        let m = z.data().iter().sum::<f64>() / 6.0;
        let s = (z.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / 6.0).sqrt();
        assert!(m.abs() < 1e-12 && (s - 1.0).abs() < 1e-12);
        let (z2, _) = zscore(&t.map(|v| 3.0 * v - 7.0));
        assert!(z.max_abs_diff(&z2) < 1e-12);
        assert!((t.data()[0] - (z.data()[0] * rec.std + rec.mean)).abs() < 1e-12);
    }

    #[test]
    fn constant_tensor_is_guarded() {
        let (z, rec) = zscore(&Tensor::filled(&[4], 2.0));
        assert_eq!(rec.std, ZSCORE_EPS);
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_input_is_empty_output() {
        let p = preprocess_sequences(
            &[],
            &SkeletonTopology::default(),
            &SsaParams::default(),
            &Split::All,
        )
        .unwrap();
        assert!(p.cycles.is_empty());
    }
}
