use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::mocap::{Frame, SkeletonTopology, NUM_JOINTS};

/// Largest |l_hp · up| accepted before a pose counts as degenerate.
pub const MAX_HIP_TILT: f64 = 0.99;

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

/// Subtracts the root joint from every joint, frame by frame.
pub fn remove_displacement(frames: &[Frame], root: usize) -> Vec<Frame> {
    frames
        .iter()
        .map(|f| {
            let r = f[root];
            let mut out = *f;
            for p in out.iter_mut() {
                *p = sub(*p, r);
            }
            out
        })
        .collect()
}

/// Expresses every frame in a body basis whose first axis is the unit hip
/// vector l = (left − right)/|left − right|, second axis d = up × l and
/// third axis up = z, by solving C·x̄ = x with C = [l | d | up].
///
/// The basis rotates with the body about the vertical, so the result is
/// invariant to heading, and the hip line lands on the first axis.
pub fn remove_rotation(frames: &[Frame], skeleton: &SkeletonTopology) -> Result<Vec<Frame>> {
    let up = Vector3::new(0.0, 0.0, 1.0);
    frames
        .iter()
        .enumerate()
        .map(|(t, f)| {
            let hip = sub(f[skeleton.left_hip], f[skeleton.right_hip]);
            let len = norm(hip);
            if !(len > 0.0) {
                return Err(Error::DegeneratePose {
                    frame: t,
                    msg: "left and right hip coincide".into(),
                });
            }
            let l = Vector3::new(hip[0], hip[1], hip[2]) / len;
            if l.dot(&up).abs() > MAX_HIP_TILT {
                return Err(Error::DegeneratePose {
                    frame: t,
                    msg: format!(
                        "hip line nearly vertical (|l.up| = {:.4})",
                        l.dot(&up).abs()
                    ),
                });
            }
            let d = up.cross(&l);
            let c = Matrix3::from_columns(&[l, d, up]);
            let inv = c.try_inverse().ok_or_else(|| Error::DegeneratePose {
                frame: t,
                msg: "singular change of basis".into(),
            })?;
            let mut out = [[0.0; 3]; NUM_JOINTS];
            for (o, p) in out.iter_mut().zip(f.iter()) {
                let v = inv * Vector3::new(p[0], p[1], p[2]);
                *o = [v[0], v[1], v[2]];
            }
            Ok(out)
        })
        .collect()
}

/// Per-frame length of every limb.
pub fn limb_lengths(frame: &Frame, skeleton: &SkeletonTopology) -> Vec<f64> {
    skeleton
        .limbs
        .iter()
        .map(|&(p, c)| norm(sub(frame[c], frame[p])))
        .collect()
}

/// Mean length of each limb over every frame of every cycle given.
pub fn mean_limb_lengths<'a, I>(cycles: I, skeleton: &SkeletonTopology) -> Result<Vec<f64>>
where
    I: IntoIterator<Item = &'a [Frame]>,
{
    let mut sums = vec![0.0; skeleton.limbs.len()];
    let mut count = 0usize;
    for frames in cycles {
        for f in frames {
            for (s, l) in sums.iter_mut().zip(limb_lengths(f, skeleton)) {
                *s += l;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::invalid("no frames to estimate limb lengths from"));
    }
    Ok(sums.into_iter().map(|s| s / count as f64).collect())
}

/// Rescales limbs to `mean_lengths`, walking parents before children so
/// each child hangs off its parent's already-rescaled position. Limb
/// directions are unchanged.
pub fn normalize_bones(
    frames: &[Frame],
    skeleton: &SkeletonTopology,
    mean_lengths: &[f64],
) -> Result<Vec<Frame>> {
    if mean_lengths.len() != skeleton.limbs.len() {
        return Err(Error::invalid(format!(
            "{} mean lengths for {} limbs",
            mean_lengths.len(),
            skeleton.limbs.len()
        )));
    }
    frames
        .iter()
        .enumerate()
        .map(|(t, f)| {
            let mut out = *f;
            for (li, &(p, c)) in skeleton.limbs.iter().enumerate() {
                let limb = sub(f[c], f[p]);
                let len = norm(limb);
                if !(len > 0.0) {
                    return Err(Error::DegeneratePose {
                        frame: t,
                        msg: format!("zero-length limb {}", skeleton.limb_name(li)),
                    });
                }
                let alpha = mean_lengths[li] / len;
                for k in 0..3 {
                    out[c][k] = alpha * limb[k] + out[p][k];
                }
            }
            Ok(out)
        })
        .collect()
}

/// Linear interpolation onto `target_len` frames spanning the same
/// normalized time [0, 1]; first and last frames are kept exactly.
pub fn resample_cycle(frames: &[Frame], target_len: usize) -> Result<Vec<Frame>> {
    let n = frames.len();
    if n < 2 || target_len < 2 {
        return Err(Error::invalid(format!(
            "cannot resample {n} frames to {target_len}"
        )));
    }
    let span = (n - 1) as f64;
    let steps = (target_len - 1) as f64;
    Ok((0..target_len)
        .map(|m| {
            let u = (m as f64 * span) / steps;
            let i = (u.floor() as usize).min(n - 1);
            let frac = u - i as f64;
            if i == n - 1 || frac == 0.0 {
                return frames[i];
            }
            let (a, b) = (&frames[i], &frames[i + 1]);
            let mut out = [[0.0; 3]; NUM_JOINTS];
            for j in 0..NUM_JOINTS {
                for k in 0..3 {
                    out[j][k] = a[j][k] + frac * (b[j][k] - a[j][k]);
                }
            }
            out
        })
        .collect())
}
