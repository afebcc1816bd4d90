use crate::mocap::{joint, Frame};

pub const NUM_FEATURES: usize = 48;

/// `(a, b, c)` chains; the angle is measured at `b`.
pub const ANGLE_CHAINS: [(&str, [usize; 3]); 8] = [
    ("l_knee", [joint::L_HIP, joint::L_KNE, joint::L_ANK]),
    ("r_knee", [joint::R_HIP, joint::R_KNE, joint::R_ANK]),
    ("l_elbow", [joint::L_SHL, joint::L_ELB, joint::L_WRIST]),
    ("r_elbow", [joint::R_SHL, joint::R_ELB, joint::R_WRIST]),
    ("l_shoulder", [joint::L_HIP, joint::L_SHL, joint::L_ELB]),
    ("r_shoulder", [joint::R_HIP, joint::R_SHL, joint::R_ELB]),
    ("l_hip", [joint::TORSO, joint::L_HIP, joint::L_KNE]),
    ("r_hip", [joint::TORSO, joint::R_HIP, joint::R_KNE]),
];

pub const SPEED_JOINTS: [(&str, usize); 4] = [
    ("l_wrist", joint::L_WRIST),
    ("r_wrist", joint::R_WRIST),
    ("l_ankle", joint::L_ANK),
    ("r_ankle", joint::R_ANK),
];

pub fn feature_names() -> Vec<String> {
    let stats = ["mean", "std", "min", "max"];
    let mut out = Vec::with_capacity(NUM_FEATURES);
    for (name, _) in ANGLE_CHAINS {
        out.extend(stats.iter().map(|s| format!("{name}_angle_{s}")));
    }
    for (name, _) in SPEED_JOINTS {
        out.extend(stats.iter().map(|s| format!("{name}_speed_{s}")));
    }
    out
}

fn stats(v: &[f64]) -> [f64; 4] {
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    [mean, std, min, max]
}

/// Angle at `b` between `a − b` and `c − b`, in [0, π]. A zero-length arm
/// counts as a straight joint.
pub fn joint_angle(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> f64 {
    let u = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    let v = [c[0] - b[0], c[1] - b[1], c[2] - b[2]];
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(nu > 0.0 && nv > 0.0) {
        log::warn!("zero-length limb in angle chain; using a straight angle");
        return std::f64::consts::PI;
    }
    let cos = (u[0] * v[0] + u[1] * v[1] + u[2] * v[2]) / (nu * nv);
    cos.clamp(-1.0, 1.0).acos()
}

/// Mean, std, min and max of eight joint angles and four joint speeds
/// (per-frame displacement) over a cycle.
pub fn extract_manual_features(frames: &[Frame]) -> Vec<f64> {
    let mut out = Vec::with_capacity(NUM_FEATURES);
    for (_, [a, b, c]) in ANGLE_CHAINS {
        let angles: Vec<f64> = frames
            .iter()
            .map(|f| joint_angle(f[a], f[b], f[c]))
            .collect();
        out.extend(stats(&angles));
    }
    for (_, j) in SPEED_JOINTS {
        let speeds: Vec<f64> = frames
            .windows(2)
            .map(|w| {
                (0..3)
                    .map(|k| (w[1][j][k] - w[0][j][k]).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        out.extend(stats(&speeds));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mocap::NUM_JOINTS;

    #[test]
    fn straight_and_right_angles() {
        assert!(
            (joint_angle([0.0, 0.0, 1.0], [0.0; 3], [0.0, 0.0, -1.0]) - std::f64::consts::PI).abs()
                < 1e-12
        );
        assert!(
            (joint_angle([1.0, 0.0, 0.0], [0.0; 3], [0.0, 2.0, 0.0]) - std::f64::consts::FRAC_PI_2)
                .abs()
                < 1e-12
        );
        assert_eq!(
            joint_angle([0.0; 3], [0.0; 3], [1.0, 0.0, 0.0]),
            std::f64::consts::PI
        );
    }

    #[test]
    fn names_match_count() {
        assert_eq!(feature_names().len(), NUM_FEATURES);
        let f = extract_manual_features(&[[[0.0; 3]; NUM_JOINTS]; 4]);
        assert_eq!(f.len(), NUM_FEATURES);
    }
}
