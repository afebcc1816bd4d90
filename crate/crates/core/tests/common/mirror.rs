//! Left/right mirror harness for attribution symmetry.

use gaitdis_core::autodiff::Tensor;
use gaitdis_core::classify::{NetClassifier, NetConfig, NetInput};
use gaitdis_core::explain::{
    aggregate_global, combine_guided, explain_all, normalize_sample, AttributionMap, Explainable,
};
use gaitdis_core::mocap::{SkeletonTopology, NUM_SIGNALS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const LEN: usize = 32;

pub fn random_cycle(rng: &mut ChaCha8Rng, len: usize) -> Tensor {
    Tensor::new(
        vec![NUM_SIGNALS, len],
        (0..NUM_SIGNALS * len)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect(),
    )
    .unwrap()
}

pub fn cnn(seed: u64) -> NetClassifier {
    NetClassifier::init(
        &NetConfig::cnn(),
        NetInput::Cycle {
            channels: NUM_SIGNALS,
            len: LEN,
        },
        4,
        seed,
    )
    .unwrap()
}

/// Signal permutation swapping left and right joints, and the sign flip of
/// the lateral axis that goes with a mirror image.
pub fn mirror(topo: &SkeletonTopology) -> (Vec<usize>, Vec<f64>) {
    let names = &topo.joint_names;
    let partner = |j: usize| -> usize {
        let n = &names[j];
        let other = if let Some(rest) = n.strip_prefix("l_") {
            format!("r_{rest}")
        } else if let Some(rest) = n.strip_prefix("r_") {
            format!("l_{rest}")
        } else {
            n.clone()
        };
        names.iter().position(|m| *m == other).unwrap()
    };
    let perm = (0..NUM_SIGNALS)
        .map(|s| 3 * partner(s / 3) + s % 3)
        .collect();
    let sign = (0..NUM_SIGNALS)
        .map(|s| if s % 3 == 0 { -1.0 } else { 1.0 })
        .collect();
    (perm, sign)
}

pub fn mirror_cycle(x: &Tensor, perm: &[usize], sign: &[f64]) -> Tensor {
    let t = x.shape()[1];
    let mut out = vec![0.0; x.len()];
    for c in 0..NUM_SIGNALS {
        for k in 0..t {
            out[perm[c] * t + k] = sign[c] * x.data()[c * t + k];
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

pub fn mirror_net(net: &NetClassifier, perm: &[usize], sign: &[f64]) -> NetClassifier {
    let mut m = net.clone();
    let id = m.store.id("conv0.w").unwrap();
    let w = net.store.get(id).clone();
    let (o, c_in, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let mut out = vec![0.0; w.len()];
    for a in 0..o {
        for c in 0..c_in {
            for t in 0..k {
                out[(a * c_in + perm[c]) * k + t] = sign[c] * w.data()[(a * c_in + c) * k + t];
            }
        }
    }
    *m.store.get_mut(id) = Tensor::new(w.shape().to_vec(), out).unwrap();
    m
}

/// Explains random cycles with a random CNN and their mirror images with the
/// mirrored CNN. Returns the largest difference between a joint's class
/// percentage and its partner's on the other side, and whether every class
/// kept its correct count.
pub fn mirror_symmetry_error(seed: u64) -> (f64, bool) {
    let topo = SkeletonTopology::default();
    let (perm, sign) = mirror(&topo);
    let net = cnn(seed);
    let twin = mirror_net(&net, &perm, &sign);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let xs: Vec<Tensor> = (0..16).map(|_| random_cycle(&mut rng, LEN)).collect();
    let ms: Vec<Tensor> = xs.iter().map(|x| mirror_cycle(x, &perm, &sign)).collect();
    let truths: Vec<usize> = (0..16).map(|i| i % 4).collect();
    let names: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();

    let run = |model: &NetClassifier, data: &[Tensor]| {
        let refs: Vec<&Tensor> = data.iter().collect();
        let maps = explain_all(Explainable::Cnn(model), &refs, &truths).unwrap();
        let normed: Vec<AttributionMap> = maps.iter().map(normalize_sample).collect();
        aggregate_global(&normed, &names, &topo).unwrap()
    };
    let a = run(&net, &xs);
    let b = run(&twin, &ms);
    let partner: Vec<usize> = (0..15).map(|j| perm[3 * j] / 3).collect();
    let mut worst: f64 = 0.0;
    let mut same_counts = true;
    for (ca, cb) in a.classes.iter().zip(&b.classes) {
        same_counts &= ca.n_correct == cb.n_correct;
        for j in 0..15 {
            worst = worst.max((ca.joint_pct[j] - cb.joint_pct[partner[j]]).abs());
        }
    }
    (worst, same_counts)
}

/// Zeroes a run of heatmap points and returns (count of attributions inside
/// the run that are not exactly zero, whether anything outside survived).
pub fn masked_interval_leak(seed: u64) -> (usize, bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grad = random_cycle(&mut rng, 128);
    let mut coarse: Vec<f64> = (0..16).map(|_| rng.gen_range(0.1..1.0)).collect();
    coarse[5..=9].iter_mut().for_each(|v| *v = 0.0);
    let out = combine_guided(&grad, &coarse).unwrap();
    // Coarse points 5..=9 sit at fine positions 5*127/15 ..= 9*127/15.
    let zero_frames: Vec<usize> = (0..128)
        .filter(|&t| {
            let pos = t as f64 * 15.0 / 127.0;
            (5.0..=9.0).contains(&pos)
        })
        .collect();
    assert!(zero_frames.len() > 30);
    let mut leaks = 0;
    for c in 0..NUM_SIGNALS {
        for &t in &zero_frames {
            if out.data()[c * 128 + t] != 0.0 {
                leaks += 1;
            }
        }
    }
    (leaks, out.data().iter().any(|&v| v != 0.0))
}
