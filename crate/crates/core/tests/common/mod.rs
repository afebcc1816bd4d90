#![allow(dead_code)]

pub mod mirror;
pub mod oracles;

use gaitdis_core::mocap::{Frame, MotionSequence, SynthConfig};

pub fn small_synth(subjects: usize, cycles: usize, noise: f64) -> SynthConfig {
    SynthConfig {
        n_subjects: subjects,
        cycles_per_pair: cycles,
        noise_std: noise,
        ..SynthConfig::default()
    }
}

/// Rotation by `angle` about the vertical axis, then scale, then translation.
pub fn transform_frame(f: &Frame, angle: f64, scale: f64, shift: [f64; 3]) -> Frame {
    let (s, c) = angle.sin_cos();
    let mut out = *f;
    for p in out.iter_mut() {
        let [x, y, z] = *p;
        *p = [
            scale * (c * x - s * y) + shift[0],
            scale * (s * x + c * y) + shift[1],
            scale * z + shift[2],
        ];
    }
    out
}

pub fn transform_sequence(
    seq: &MotionSequence,
    angle: f64,
    scale: f64,
    shift: [f64; 3],
) -> MotionSequence {
    MotionSequence {
        frames: seq
            .frames
            .iter()
            .map(|f| transform_frame(f, angle, scale, shift))
            .collect(),
        ..seq.clone()
    }
}

pub fn max_frame_diff(a: &[Frame], b: &[Frame]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            x.iter()
                .zip(y)
                .flat_map(|(p, q)| (0..3).map(move |k| (p[k] - q[k]).abs()))
        })
        .fold(0.0, f64::max)
}
