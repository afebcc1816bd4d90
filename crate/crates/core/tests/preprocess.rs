mod common;

use std::collections::BTreeSet;
use std::f64::consts::TAU;

use gaitdis_core::autodiff::Tensor;
use gaitdis_core::mocap::{
    synth_generate, Affect, Frame, MotionSequence, SkeletonTopology, Synthesizer, NUM_JOINTS,
};
use gaitdis_core::preprocess::{
    detect_heel_strikes, limb_lengths, normalize_bones, preprocess_sequences, read_cycles,
    remove_displacement, remove_rotation, resample_cycle, ssa_smooth, write_cycles, zscore, Split,
    SsaParams, CYCLE_LEN,
};
use gaitdis_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn second_diff_var(s: &[f64]) -> f64 {
    let d: Vec<f64> = s.windows(3).map(|w| w[2] - 2.0 * w[1] + w[0]).collect();
    let m = d.iter().sum::<f64>() / d.len() as f64;
    d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / d.len() as f64
}

#[test]
fn ssa_full_rank_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s: Vec<f64> = (0..80).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let out = ssa_smooth(
        &s,
        &SsaParams {
            window: 12,
            components: 12,
        },
    )
    .unwrap();
    for (a, b) in s.iter().zip(&out) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn ssa_keeps_a_sinusoid_with_two_components() {
    let s: Vec<f64> = (0..240)
        .map(|t| (TAU * t as f64 / 60.0 + 0.3).sin())
        .collect();
    let out = ssa_smooth(&s, &SsaParams::default()).unwrap();
    for (a, b) in s.iter().zip(&out) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn ssa_reduces_roughness_of_noisy_sinusoid() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let noise = Normal::new(0.0, 0.2).unwrap();
    let s: Vec<f64> = (0..300)
        .map(|t| (TAU * t as f64 / 60.0).sin() + noise.sample(&mut rng))
        .collect();
    let out = ssa_smooth(&s, &SsaParams::default()).unwrap();
    assert!(second_diff_var(&out) < 0.1 * second_diff_var(&s));
}

#[test]
fn ssa_rejects_bad_windows() {
    let s = vec![1.0, 2.0, 3.0, 4.0, 5.0];
    assert!(ssa_smooth(
        &s,
        &SsaParams {
            window: 3,
            components: 1
        }
    )
    .is_err());
    assert!(ssa_smooth(
        &s,
        &SsaParams {
            window: 2,
            components: 3
        }
    )
    .is_err());
    assert!(ssa_smooth(
        &[1.0, f64::NAN, 0.0, 1.0],
        &SsaParams {
            window: 2,
            components: 1
        }
    )
    .is_err());
}

#[test]
fn one_hertz_gait_strikes_sixty_frames_apart() {
    let synth = Synthesizer::new(common::small_synth(2, 12, 0.0005)).unwrap();
    let sk = SkeletonTopology::default();
    for i in 0..2 {
        let seq = synth.generate_sequence(i, Affect::Neutral).unwrap();
        let strikes = detect_heel_strikes(&seq, sk.right_ankle, &SsaParams::default()).unwrap();
        assert_eq!(strikes.len(), 13);
        for w in strikes.windows(2) {
            assert!((57..=63).contains(&(w[1] - w[0])), "{strikes:?}");
        }
    }
}

#[test]
fn motionless_sequence_has_no_gait() {
    let seq = MotionSequence {
        id: "still".into(),
        subject_id: "s01".into(),
        affect: Affect::Sad,
        frame_rate: 60.0,
        frames: vec![[[0.1, 0.2, 0.3]; NUM_JOINTS]; 300],
    };
    let err = detect_heel_strikes(&seq, 14, &SsaParams::default()).unwrap_err();
    assert!(matches!(err, Error::NoGaitCycle(_)));
}

#[test]
fn two_root_relative_cycles_give_three_strikes() {
    let synth = Synthesizer::new(common::small_synth(1, 2, 0.0)).unwrap();
    let sk = SkeletonTopology::default();
    let mut seq = synth.clean_sequence(0, Affect::Angry).unwrap();
    seq.frames = remove_displacement(&seq.frames, sk.root);
    let strikes = detect_heel_strikes(&seq, sk.right_ankle, &SsaParams::default()).unwrap();
    assert_eq!(strikes.len(), 3, "{strikes:?}");
    for (c, &s) in strikes.iter().enumerate() {
        assert!(s.abs_diff(24 + 48 * c) <= 2, "{strikes:?}");
    }
}

fn random_frame(rng: &mut ChaCha8Rng) -> Frame {
    let mut f = [[0.0; 3]; NUM_JOINTS];
    for p in f.iter_mut() {
        *p = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
    }
    f[9] = [0.1, 0.02, 0.95];
    f[12] = [-0.1, -0.01, 0.94];
    f
}

#[test]
fn displacement_is_removed_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let f: Vec<Frame> = (0..5).map(|_| random_frame(&mut rng)).collect();
    let shifted: Vec<Frame> = f
        .iter()
        .map(|x| common::transform_frame(x, 0.0, 1.0, [3.0, -2.0, 0.5]))
        .collect();
    let a = remove_displacement(&f, 8);
    let b = remove_displacement(&shifted, 8);
    assert!(a.iter().all(|x| x[8] == [0.0; 3]));
    assert!(common::max_frame_diff(&a, &b) < 1e-12);
}

#[test]
fn heading_is_removed() {
    let sk = SkeletonTopology::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let f: Vec<Frame> = (0..6).map(|_| random_frame(&mut rng)).collect();
    let f = remove_displacement(&f, sk.root);
    let base = remove_rotation(&f, &sk).unwrap();
    let quarter: Vec<Frame> = f
        .iter()
        .map(|x| common::transform_frame(x, TAU / 4.0, 1.0, [0.0; 3]))
        .collect();
    assert!(common::max_frame_diff(&base, &remove_rotation(&quarter, &sk).unwrap()) < 1e-9);
    for _ in 0..10 {
        let th = rng.gen_range(-TAU..TAU);
        let rot: Vec<Frame> = f
            .iter()
            .map(|x| common::transform_frame(x, th, 1.0, [0.0; 3]))
            .collect();
        assert!(common::max_frame_diff(&base, &remove_rotation(&rot, &sk).unwrap()) < 1e-9);
    }
    for x in &base {
        let h = [x[9][0] - x[12][0], x[9][1] - x[12][1]];
        assert!(h[0] > 0.0 && h[1].abs() < 1e-12);
    }
}

#[test]
fn bones_take_the_requested_lengths() {
    let sk = SkeletonTopology::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let f: Vec<Frame> = (0..4).map(|_| random_frame(&mut rng)).collect();
    let means: Vec<f64> = (0..sk.limbs.len())
        .map(|_| rng.gen_range(0.05..0.6))
        .collect();
    let out = normalize_bones(&f, &sk, &means).unwrap();
    for (x, o) in f.iter().zip(&out) {
        assert_eq!(o[sk.root], x[sk.root]);
        for (l, m) in limb_lengths(o, &sk).iter().zip(&means) {
            assert!((l - m).abs() < 1e-12);
        }
        for &(p, c) in &sk.limbs {
            let a: Vec<f64> = (0..3).map(|k| x[c][k] - x[p][k]).collect();
            let b: Vec<f64> = (0..3).map(|k| o[c][k] - o[p][k]).collect();
            let cross = [
                a[1] * b[2] - a[2] * b[1],
                a[2] * b[0] - a[0] * b[2],
                a[0] * b[1] - a[1] * b[0],
            ];
            assert!(cross.iter().all(|v| v.abs() < 1e-12));
            assert!(a.iter().zip(&b).map(|(p, q)| p * q).sum::<f64>() > 0.0);
        }
    }
}

#[test]
fn resampling_ramp_and_sinusoid() {
    let ramp: Vec<Frame> = (0..50)
        .map(|t| [[t as f64 / 49.0; 3]; NUM_JOINTS])
        .collect();
    let r = resample_cycle(&ramp, CYCLE_LEN).unwrap();
    for (m, f) in r.iter().enumerate() {
        assert!((f[3][1] - m as f64 / 127.0).abs() < 1e-12);
    }
    let n = 61;
    let sine: Vec<Frame> = (0..n)
        .map(|t| [[(TAU * t as f64 / (n - 1) as f64).sin(); 3]; NUM_JOINTS])
        .collect();
    let r = resample_cycle(&sine, CYCLE_LEN).unwrap();
    let rms = (r
        .iter()
        .enumerate()
        .map(|(m, f)| (f[0][0] - (TAU * m as f64 / 127.0).sin()).powi(2))
        .sum::<f64>()
        / CYCLE_LEN as f64)
        .sqrt();
    assert!(rms < 1e-3, "{rms}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn zscore_moments(data in prop::collection::vec(-1e3f64..1e3, 2..300)) {
        let t = Tensor::from_vec(data.clone());
        let (z, rec) = zscore(&t);
        let n = data.len() as f64;
        let m = z.data().iter().sum::<f64>() / n;
        prop_assert!(m.abs() < 1e-9);
        let spread = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - data.iter().cloned().fold(f64::INFINITY, f64::min);
        if spread > 1e-6 {
            let v = z.data().iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
            prop_assert!((v - 1.0).abs() < 1e-9);
        }
        for (x, y) in data.iter().zip(z.data()) {
            prop_assert!((x - (y * rec.std + rec.mean)).abs() < 1e-9 * (1.0 + x.abs()));
        }
    }
}

fn small_dataset(cycles: usize) -> gaitdis_core::mocap::SynthDataset {
    synth_generate(&common::small_synth(2, cycles, 0.0005)).unwrap()
}

#[test]
fn pipeline_output_invariants() {
    let ds = small_dataset(6);
    let sk = &ds.manifest.skeleton;
    let p = preprocess_sequences(&ds.sequences, sk, &SsaParams::default(), &Split::All).unwrap();
    assert!(p.cycles.len() >= 8 * 6);
    for c in &p.cycles {
        assert_eq!(c.tensor.shape(), &[45, CYCLE_LEN]);
        let d = c.tensor.data();
        let n = d.len() as f64;
        let m = d.iter().sum::<f64>() / n;
        let v = d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
        assert!(m.abs() < 1e-10 && (v - 1.0).abs() < 1e-10);
        let bones = c.bone_normalized(sk, &p.limb_means).unwrap();
        assert_eq!(bones.len(), CYCLE_LEN);
        for f in &c.geometry {
            assert!((f[sk.left_hip][1] - f[sk.right_hip][1]).abs() < 1e-10);
            assert!((f[sk.left_hip][2] - f[sk.right_hip][2]).abs() < 1e-10);
            assert!(f[sk.left_hip][0] > f[sk.right_hip][0]);
        }
        for f in &bones {
            assert_eq!(f[sk.root], [0.0; 3]);
            for (l, m) in limb_lengths(f, sk).iter().zip(&p.limb_means) {
                assert!((l - m).abs() < 1e-10);
            }
        }
        for s in 0..45 {
            for t in 0..CYCLE_LEN {
                let raw = bones[t][s / 3][s % 3];
                assert!((d[s * CYCLE_LEN + t] - (raw - c.norm.mean) / c.norm.std).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn pipeline_ignores_heading_position_and_scale() {
    let ds = small_dataset(4);
    let sk = &ds.manifest.skeleton;
    let moved: Vec<MotionSequence> = ds
        .sequences
        .iter()
        .enumerate()
        .map(|(i, s)| common::transform_sequence(s, 0.7 + i as f64, 1.8, [4.0, -3.0, 0.2]))
        .collect();
    let a = preprocess_sequences(&ds.sequences, sk, &SsaParams::default(), &Split::All).unwrap();
    let b = preprocess_sequences(&moved, sk, &SsaParams::default(), &Split::All).unwrap();
    assert_eq!(a.cycles.len(), b.cycles.len());
    for (x, y) in a.cycles.iter().zip(&b.cycles) {
        assert_eq!(x.source, y.source);
        assert!(x.tensor.max_abs_diff(&y.tensor) < 1e-9);
    }
}

#[test]
fn limb_means_follow_the_training_split() {
    let ds = small_dataset(4);
    let sk = &ds.manifest.skeleton;
    let train: BTreeSet<String> = ds
        .sequences
        .iter()
        .filter(|s| s.subject_id == "s01")
        .map(|s| s.id.clone())
        .collect();
    let all = preprocess_sequences(&ds.sequences, sk, &SsaParams::default(), &Split::All).unwrap();
    let part = preprocess_sequences(
        &ds.sequences,
        sk,
        &SsaParams::default(),
        &Split::Sequences(train.clone()),
    )
    .unwrap();
    let s01: Vec<MotionSequence> = ds
        .sequences
        .iter()
        .filter(|s| train.contains(&s.id))
        .cloned()
        .collect();
    let only = preprocess_sequences(&s01, sk, &SsaParams::default(), &Split::All).unwrap();
    assert_eq!(part.limb_means, only.limb_means);
    assert_ne!(part.limb_means, all.limb_means);

    let mut c = all.cycles[0].clone();
    c.renormalize(sk, &part.limb_means).unwrap();
    let same = part.cycles.iter().find(|p| p.source == c.source).unwrap();
    assert!(c.tensor.max_abs_diff(&same.tensor) < 1e-12);
}

#[test]
fn failures_are_aggregated() {
    let ds = small_dataset(3);
    let mut seqs = ds.sequences.clone();
    for s in seqs.iter_mut().take(2) {
        let f = s.frames[0];
        for x in s.frames.iter_mut() {
            *x = f;
        }
    }
    match preprocess_sequences(
        &seqs,
        &ds.manifest.skeleton,
        &SsaParams::default(),
        &Split::All,
    ) {
        Err(Error::Preprocess { count, details }) => {
            assert_eq!(count, 2);
            assert!(details.contains(&seqs[0].id) && details.contains(&seqs[1].id));
        }
        other => panic!(
            "expected aggregated failure, got {:?}",
            other.map(|p| p.cycles.len())
        ),
    }
}

#[test]
fn cycle_store_round_trip() {
    let ds = small_dataset(3);
    let sk = &ds.manifest.skeleton;
    let ssa = SsaParams::default();
    let p = preprocess_sequences(&ds.sequences, sk, &ssa, &Split::All).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let index = write_cycles(dir.path(), &p, sk, &ssa).unwrap();
    assert_eq!(index.cycles.len(), p.cycles.len());
    let text = std::fs::read_to_string(dir.path().join(&index.cycles[0].file)).unwrap();
    assert_eq!(text.lines().count(), CYCLE_LEN + 1);
    let back = read_cycles(dir.path()).unwrap();
    assert_eq!(back.limb_means, p.limb_means);
    assert_eq!(back.ssa, ssa);
    assert_eq!(back.cycles, p.cycles);
}
