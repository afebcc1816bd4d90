//! Deterministic synthetic walkers.
//!
//! A pose is a function of gait phase θ (right heel strike at θ = 0):
//!
//! ```text
//! pose(i, j, θ) = rest + base(θ) + style_i(θ) + modulation_j(θ)
//! ```
//!
//! `base` is the neutral walk, `modulation_j` is linear in the affect's
//! offsets from neutral and `style_i` never depends on the affect, so the
//! pose of any (subject, affect) pair is available in closed form. Frames are
//! sampled at θ(t) = 2π·cadence·t − π, which puts heel strikes half a cycle
//! away from either end of the sequence.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{
    joint::*, Affect, DatasetManifest, Frame, ManifestEntry, MotionSequence, SkeletonTopology,
    NUM_JOINTS,
};
use crate::error::{Error, Result};

const REST: Frame = [
    [0.0, 0.03, 1.62],
    [0.0, 0.0, 1.30],
    [0.18, 0.0, 1.45],
    [0.20, 0.0, 1.17],
    [0.21, 0.03, 0.92],
    [-0.18, 0.0, 1.45],
    [-0.20, 0.0, 1.17],
    [-0.21, 0.03, 0.92],
    [0.0, 0.0, 1.00],
    [0.10, 0.0, 0.98],
    [0.10, 0.02, 0.54],
    [0.10, -0.02, 0.10],
    [-0.10, 0.0, 0.98],
    [-0.10, 0.02, 0.54],
    [-0.10, -0.02, 0.10],
];

// Neutral-walk amplitudes in meters.
const FOOT_FORE: f64 = 0.4;
const FOOT_LIFT: f64 = 0.25;
const WRIST_SWING: f64 = 0.2;
const HIP_YAW: f64 = 0.04;
const BOB: f64 = 0.02;
const STRIDE: f64 = 1.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffectParams {
    pub stride_scale: f64,
    pub arm_swing: f64,
    /// Forward/down slump of head, shoulders and arms (meters).
    pub flexion: f64,
    /// Gait cycles per second.
    pub cadence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffectTable {
    pub angry: AffectParams,
    pub happy: AffectParams,
    pub neutral: AffectParams,
    pub sad: AffectParams,
}

impl AffectTable {
    pub fn get(&self, a: Affect) -> &AffectParams {
        match a {
            Affect::Angry => &self.angry,
            Affect::Happy => &self.happy,
            Affect::Neutral => &self.neutral,
            Affect::Sad => &self.sad,
        }
    }
}

impl Default for AffectTable {
    fn default() -> Self {
        let p = |stride_scale, arm_swing, flexion, cadence| AffectParams {
            stride_scale,
            arm_swing,
            flexion,
            cadence,
        };
        Self {
            angry: p(1.15, 1.25, 0.02, 1.25),
            happy: p(1.2, 1.35, -0.02, 1.2),
            neutral: p(1.0, 1.0, 0.0, 1.0),
            sad: p(0.8, 0.6, 0.07, 0.9375),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SubjectRanges {
    /// Uniform skeleton scale range.
    pub scale: (f64, f64),
    /// Arm-swing phase offset range (radians).
    pub phase_offset: (f64, f64),
    /// Half-width of the per-joint static posture offsets (meters).
    pub style_amplitude: f64,
}

impl Default for SubjectRanges {
    fn default() -> Self {
        Self {
            scale: (0.9, 1.1),
            phase_offset: (-0.6, 0.6),
            style_amplitude: 0.03,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub n_affects: usize,
    pub cycles_per_pair: usize,
    pub frame_rate: f64,
    pub noise_std: f64,
    pub rng_seed: u64,
    pub subjects: SubjectRanges,
    pub affects: AffectTable,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_subjects: 6,
            n_affects: 4,
            cycles_per_pair: 40,
            frame_rate: 60.0,
            noise_std: 0.0005,
            rng_seed: 7,
            subjects: SubjectRanges::default(),
            affects: AffectTable::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.n_subjects == 0 {
            return bad("n_subjects must be positive".into());
        }
        if self.n_affects != Affect::COUNT {
            return bad(format!("n_affects is fixed at {}", Affect::COUNT));
        }
        if self.cycles_per_pair == 0 {
            return bad("cycles_per_pair must be positive".into());
        }
        if !(self.frame_rate.is_finite() && self.frame_rate > 0.0) {
            return bad(format!("frame_rate {} must be positive", self.frame_rate));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return bad(format!("noise_std {} must be non-negative", self.noise_std));
        }
        let r = &self.subjects;
        if !(r.scale.0 > 0.0 && r.scale.0 <= r.scale.1) {
            return bad(format!("subject scale range {:?} invalid", r.scale));
        }
        if r.phase_offset.0 > r.phase_offset.1 || !(r.style_amplitude >= 0.0) {
            return bad("subject phase/style ranges invalid".into());
        }
        for a in Affect::ALL {
            let p = self.affects.get(a);
            if !(p.stride_scale > 0.0
                && p.arm_swing > 0.0
                && p.cadence > 0.0
                && p.flexion.is_finite())
            {
                return bad(format!("affect {a} parameters must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectParams {
    pub id: String,
    pub scale: f64,
    pub arm_phase: f64,
    pub posture: Vec<[f64; 3]>,
}

#[derive(Clone, Debug)]
pub struct Synthesizer {
    cfg: SynthConfig,
    subjects: Vec<SubjectParams>,
}

pub struct SynthDataset {
    pub sequences: Vec<MotionSequence>,
    pub manifest: DatasetManifest,
    pub synthesizer: Synthesizer,
}

fn subject_id(i: usize) -> String {
    format!("s{:02}", i + 1)
}

fn sequence_id(i: usize, a: Affect) -> String {
    format!("{}_{}", subject_id(i), a)
}

/// Phase-dependent displacements, linear in (stride, arm, flex).
fn gait_terms(theta: f64, stride: f64, arm: f64, flex: f64) -> Frame {
    let mut f = [[0.0; 3]; NUM_JOINTS];
    for (ankle, knee, hip, ph) in [
        (R_ANK, R_KNE, R_HIP, theta),
        (L_ANK, L_KNE, L_HIP, theta + PI),
    ] {
        let fore = -ph.cos() + (2.0 * ph).cos() / 4.0;
        let lift = -ph.sin() + (2.0 * ph).sin() / 4.0;
        f[ankle][1] += stride * FOOT_FORE * fore;
        f[ankle][2] += stride * FOOT_LIFT * lift;
        f[knee][1] += stride * (0.5 * FOOT_FORE * fore + 0.04 * (1.0 - ph.cos()));
        f[knee][2] += stride * 0.4 * FOOT_LIFT * lift;
        f[hip][1] -= stride * HIP_YAW * ph.cos();
    }
    let swing = theta.cos();
    f[R_WRIST][1] += arm * WRIST_SWING * swing;
    f[L_WRIST][1] -= arm * WRIST_SWING * swing;
    f[R_ELB][1] += arm * 0.5 * WRIST_SWING * swing;
    f[L_ELB][1] -= arm * 0.5 * WRIST_SWING * swing;
    f[R_SHL][1] += arm * 0.3 * HIP_YAW * swing;
    f[L_SHL][1] -= arm * 0.3 * HIP_YAW * swing;

    let bob = stride * BOB * (2.0 * theta).cos();
    for j in [
        HEAD, TORSO, L_SHL, L_ELB, L_WRIST, R_SHL, R_ELB, R_WRIST, C_HIP, L_HIP, R_HIP,
    ] {
        f[j][2] += bob;
    }

    f[HEAD][1] += 1.2 * flex;
    f[HEAD][2] -= 0.5 * flex;
    f[TORSO][1] += 0.5 * flex;
    for j in [L_SHL, R_SHL] {
        f[j][1] += 0.9 * flex;
        f[j][2] -= 0.2 * flex;
    }
    for j in [L_ELB, R_ELB, L_WRIST, R_WRIST] {
        f[j][1] += 0.8 * flex;
    }
    for j in [L_KNE, R_KNE] {
        f[j][1] += 0.3 * flex;
    }

    let advance = stride * STRIDE * theta / TAU;
    for p in f.iter_mut() {
        p[1] += advance;
    }
    f
}

fn add_into(acc: &mut Frame, other: &Frame) {
    for (a, b) in acc.iter_mut().zip(other) {
        for k in 0..3 {
            a[k] += b[k];
        }
    }
}

impl Synthesizer {
    pub fn new(cfg: SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        let r = &cfg.subjects;
        let uniform = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
            if hi > lo {
                rng.gen_range(lo..hi)
            } else {
                lo
            }
        };
        let subjects = (0..cfg.n_subjects)
            .map(|i| {
                let scale = uniform(&mut rng, r.scale.0, r.scale.1);
                let arm_phase = uniform(&mut rng, r.phase_offset.0, r.phase_offset.1);
                let posture = (0..NUM_JOINTS)
                    .map(|j| {
                        let mut o = [0.0; 3];
                        for v in o.iter_mut() {
                            *v = uniform(&mut rng, -r.style_amplitude, r.style_amplitude);
                        }
                        if j == C_HIP {
                            [0.0; 3]
                        } else {
                            o
                        }
                    })
                    .collect();
                SubjectParams {
                    id: subject_id(i),
                    scale,
                    arm_phase,
                    posture,
                }
            })
            .collect();
        Ok(Self { cfg, subjects })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    pub fn subjects(&self) -> &[SubjectParams] {
        &self.subjects
    }

    fn check(&self, subject: usize) -> Result<&SubjectParams> {
        self.subjects
            .get(subject)
            .ok_or_else(|| Error::invalid(format!("unknown subject index {subject}")))
    }

    pub fn base_gait(&self, theta: f64) -> Frame {
        let mut f = REST;
        add_into(&mut f, &gait_terms(theta, 1.0, 1.0, 0.0));
        f
    }

    pub fn subject_style(&self, subject: usize, theta: f64) -> Result<Frame> {
        let s = self.check(subject)?;
        let mut f = [[0.0; 3]; NUM_JOINTS];
        for j in 0..NUM_JOINTS {
            for k in 0..3 {
                f[j][k] = (s.scale - 1.0) * REST[j][k] + s.posture[j][k];
            }
        }
        let shift = (theta + s.arm_phase).cos() - theta.cos();
        f[R_WRIST][1] += WRIST_SWING * shift;
        f[L_WRIST][1] -= WRIST_SWING * shift;
        f[R_ELB][1] += 0.5 * WRIST_SWING * shift;
        f[L_ELB][1] -= 0.5 * WRIST_SWING * shift;
        Ok(f)
    }

    pub fn affect_modulation(&self, affect: Affect, theta: f64) -> Frame {
        let p = self.cfg.affects.get(affect);
        gait_terms(theta, p.stride_scale - 1.0, p.arm_swing - 1.0, p.flexion)
    }

    /// Noise-free pose of `subject` walking with `affect` at phase `theta`.
    pub fn pose(&self, subject: usize, affect: Affect, theta: f64) -> Result<Frame> {
        let mut f = self.base_gait(theta);
        add_into(&mut f, &self.subject_style(subject, theta)?);
        add_into(&mut f, &self.affect_modulation(affect, theta));
        Ok(f)
    }

    fn frames_per_cycle(&self, affect: Affect) -> f64 {
        self.cfg.frame_rate / self.cfg.affects.get(affect).cadence
    }

    pub fn phase_of_frame(&self, affect: Affect, frame: usize) -> f64 {
        TAU * frame as f64 / self.frames_per_cycle(affect) - PI
    }

    /// Frame count covering `cycles_per_pair` full cycles plus half a cycle
    /// of lead-in and lead-out.
    pub fn sequence_len(&self, affect: Affect) -> usize {
        ((self.cfg.cycles_per_pair + 1) as f64 * self.frames_per_cycle(affect)).round() as usize + 1
    }

    /// First frame whose phase is at or after 2π·cycle.
    fn cycle_start(&self, affect: Affect, cycle: usize) -> usize {
        ((cycle as f64 + 0.5) * self.frames_per_cycle(affect) - 1e-9).ceil() as usize
    }

    fn make_sequence(
        &self,
        id: String,
        subject: usize,
        affect: Affect,
        frames: Vec<Frame>,
    ) -> MotionSequence {
        MotionSequence {
            id,
            subject_id: self.subjects[subject].id.clone(),
            affect,
            frame_rate: self.cfg.frame_rate,
            frames,
        }
    }

    pub fn clean_sequence(&self, subject: usize, affect: Affect) -> Result<MotionSequence> {
        self.check(subject)?;
        let frames = (0..self.sequence_len(affect))
            .map(|t| self.pose(subject, affect, self.phase_of_frame(affect, t)))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.make_sequence(sequence_id(subject, affect), subject, affect, frames))
    }

    /// Clean sequence plus i.i.d. Gaussian noise from a stream keyed by the
    /// (subject, affect) pair, so pairs can be generated independently.
    pub fn generate_sequence(&self, subject: usize, affect: Affect) -> Result<MotionSequence> {
        let mut seq = self.clean_sequence(subject, affect)?;
        if self.cfg.noise_std > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.rng_seed);
            rng.set_stream(1 + (subject * Affect::COUNT + affect.index()) as u64);
            for v in seq.frames.iter_mut().flatten().flatten() {
                let z: f64 = rng.sample(StandardNormal);
                *v += self.cfg.noise_std * z;
            }
        }
        Ok(seq)
    }

    /// The noise-free frames of cycle `cycle` of subject `subject` walking
    /// with `affect`: exactly the frames `clean_sequence` produces whose
    /// phase lies in [2π·cycle, 2π·(cycle+1)).
    pub fn exact_cross_target(
        &self,
        subject: usize,
        affect: Affect,
        cycle: usize,
    ) -> Result<MotionSequence> {
        self.check(subject)?;
        if cycle >= self.cfg.cycles_per_pair {
            return Err(Error::invalid(format!(
                "cycle {cycle} outside 0..{}",
                self.cfg.cycles_per_pair
            )));
        }
        let (a, b) = (
            self.cycle_start(affect, cycle),
            self.cycle_start(affect, cycle + 1),
        );
        let frames = (a..b)
            .map(|t| self.pose(subject, affect, self.phase_of_frame(affect, t)))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.make_sequence(
            format!("{}_c{cycle}", sequence_id(subject, affect)),
            subject,
            affect,
            frames,
        ))
    }

    /// The same cycle sampled at `n` uniform phases 2π·(cycle + m/n).
    pub fn exact_cycle_at_phases(
        &self,
        subject: usize,
        affect: Affect,
        cycle: usize,
        n: usize,
    ) -> Result<MotionSequence> {
        self.check(subject)?;
        if n < 2 {
            return Err(Error::invalid("need at least 2 phase samples"));
        }
        let frames = (0..n)
            .map(|m| self.pose(subject, affect, TAU * (cycle as f64 + m as f64 / n as f64)))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.make_sequence(
            format!("{}_c{cycle}", sequence_id(subject, affect)),
            subject,
            affect,
            frames,
        ))
    }
}

/// One multi-cycle sequence per (subject, affect) pair plus a manifest whose
/// entries name `<subject>_<affect>.csv`.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    let synth = Synthesizer::new(cfg.clone())?;
    let pairs: Vec<(usize, Affect)> = (0..cfg.n_subjects)
        .flat_map(|i| Affect::ALL.into_iter().map(move |a| (i, a)))
        .collect();
    let sequences = crate::parallel::try_map(&pairs, |&(i, a)| synth.generate_sequence(i, a))?;
    let entries = sequences
        .iter()
        .map(|s| ManifestEntry {
            file: format!("{}.csv", s.id).into(),
            subject_id: s.subject_id.clone(),
            affect: s.affect,
        })
        .collect();
    let manifest = DatasetManifest {
        entries,
        skeleton: SkeletonTopology::default(),
        provenance: format!(
            "synthetic: {} subjects x {} affects x {} cycles, {} Hz, noise {} m, seed {}",
            cfg.n_subjects,
            cfg.n_affects,
            cfg.cycles_per_pair,
            cfg.frame_rate,
            cfg.noise_std,
            cfg.rng_seed
        ),
        base_dir: Default::default(),
    };
    Ok(SynthDataset {
        sequences,
        manifest,
        synthesizer: synth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frames_per_cycle_are_whole_for_defaults() {
        let s = Synthesizer::new(SynthConfig::default()).unwrap();
        for a in Affect::ALL {
            let n = s.frames_per_cycle(a);
            assert_eq!(n, n.round(), "{a}");
            assert_eq!(s.sequence_len(a), 41 * n as usize + 1);
        }
    }

    #[test]
    fn ankle_acceleration_vanishes_at_heel_strike() {
        let s = Synthesizer::new(SynthConfig::default()).unwrap();
        let h = 1e-4;
        let acc = |th: f64| {
            let p = |t| s.pose(0, Affect::Neutral, t).unwrap()[R_ANK];
            let (a, b, c) = (p(th - h), p(th), p(th + h));
            (0..3)
                .map(|k| ((a[k] - 2.0 * b[k] + c[k]) / (h * h)).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        assert!(acc(0.0) < 1e-4);
        assert!(acc(PI) > 0.5);
    }

    #[test]
    fn unknown_subject_rejected() {
        let s = Synthesizer::new(SynthConfig::default()).unwrap();
        assert!(s.exact_cross_target(6, Affect::Sad, 0).is_err());
        assert!(s.exact_cross_target(0, Affect::Sad, 40).is_err());
    }
}
