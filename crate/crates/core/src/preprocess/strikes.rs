use serde::{Deserialize, Serialize};

use super::ssa::{ssa_smooth, SsaParams};
use crate::error::{Error, Result};
use crate::mocap::{Affect, Frame, MotionSequence};

/// Minimum spacing between strikes as a fraction of the frame rate.
pub const MIN_SEPARATION_S: f64 = 0.4;
/// Minimum prominence as a fraction of the smoothed signal's range.
pub const MIN_PROMINENCE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleSource {
    pub sequence_id: String,
    /// First frame (inclusive).
    pub start: usize,
    /// Next heel strike (exclusive).
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawCycle {
    pub subject_id: String,
    pub affect: Affect,
    pub source: CycleSource,
    pub frames: Vec<Frame>,
}

/// |x[t+1] − 2x[t] + x[t−1]| with the end values copied from their neighbours.
pub fn acceleration_magnitude(track: &[[f64; 3]]) -> Vec<f64> {
    let n = track.len();
    if n < 3 {
        return vec![0.0; n];
    }
    let mut acc = vec![0.0; n];
    for t in 1..n - 1 {
        acc[t] = (0..3)
            .map(|k| (track[t + 1][k] - 2.0 * track[t][k] + track[t - 1][k]).powi(2))
            .sum::<f64>()
            .sqrt();
    }
    acc[0] = acc[1];
    acc[n - 1] = acc[n - 2];
    acc
}

/// Local minima of `s` whose prominence is at least `rel_prominence` of the
/// signal range, thinned greedily (deepest first) to be `min_sep` apart.
///
/// An end point counts when the signal rises away from it, it is prominent
/// on its one side, and it sits within `rel_prominence` of the global
/// minimum; a sequence that merely stops part-way down a slope yields none.
pub fn find_minima(s: &[f64], min_sep: usize, rel_prominence: f64) -> Vec<usize> {
    let n = s.len();
    if n < 2 {
        return Vec::new();
    }
    let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 0.0) {
        return Vec::new();
    }
    let threshold = rel_prominence * range;

    let mut cands = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && s[j + 1] == s[i] {
            j += 1;
        }
        let falls_in = i == 0 || s[i - 1] > s[i];
        let rises_out = j == n - 1 || s[j + 1] > s[i];
        let edge = i == 0 || j == n - 1;
        if falls_in && rises_out && !(i == 0 && j == n - 1) {
            let v = s[i];
            let left = if i == 0 {
                None
            } else {
                let mut m = v;
                let mut q = i;
                while q > 0 && s[q - 1] >= v {
                    q -= 1;
                    m = m.max(s[q]);
                }
                Some(m)
            };
            let right = if j == n - 1 {
                None
            } else {
                let mut m = v;
                let mut q = j;
                while q + 1 < n && s[q + 1] >= v {
                    q += 1;
                    m = m.max(s[q]);
                }
                Some(m)
            };
            let base = match (left, right) {
                (Some(a), Some(b)) => a.min(b),
                (Some(a), None) | (None, Some(a)) => a,
                (None, None) => v,
            };
            let deep_enough = !edge || v - lo <= threshold;
            if base - v >= threshold && deep_enough {
                cands.push(if edge {
                    if i == 0 {
                        0
                    } else {
                        n - 1
                    }
                } else {
                    (i + j) / 2
                });
            }
        }
        i = j + 1;
    }

    cands.sort_by(|&a, &b| s[a].total_cmp(&s[b]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for c in cands {
        if kept.iter().all(|&k| k.abs_diff(c) >= min_sep) {
            kept.push(c);
        }
    }
    kept.sort_unstable();
    kept
}

/// Heel strikes of the joint `ankle`: minima of its SSA-smoothed
/// acceleration magnitude. The magnitude is centered before smoothing so
/// the k leading components describe its oscillation rather than its level.
pub fn detect_heel_strikes(
    motion: &MotionSequence,
    ankle: usize,
    ssa: &SsaParams,
) -> Result<Vec<usize>> {
    if motion.len() < 3 {
        return Err(Error::invalid(format!(
            "sequence {} has {} frames; heel-strike detection needs 3",
            motion.id,
            motion.len()
        )));
    }
    let acc = acceleration_magnitude(&motion.joint_track(ankle));
    let mean = acc.iter().sum::<f64>() / acc.len() as f64;
    let centered: Vec<f64> = acc.iter().map(|a| a - mean).collect();
    let smooth = ssa_smooth(&centered, ssa)?;
    let min_sep = ((MIN_SEPARATION_S * motion.frame_rate).round() as usize).max(1);
    let strikes = find_minima(&smooth, min_sep, MIN_PROMINENCE);
    if strikes.len() < 2 {
        return Err(Error::NoGaitCycle(format!(
            "sequence {}: {} heel strike(s) found",
            motion.id,
            strikes.len()
        )));
    }
    Ok(strikes)
}

/// One cycle per consecutive strike pair, `[a, b)`.
pub fn segment_cycles(motion: &MotionSequence, strikes: &[usize]) -> Vec<RawCycle> {
    strikes
        .windows(2)
        .filter(|w| w[0] < w[1] && w[1] <= motion.len())
        .map(|w| RawCycle {
            subject_id: motion.subject_id.clone(),
            affect: motion.affect,
            source: CycleSource {
                sequence_id: motion.id.clone(),
                start: w[0],
                end: w[1],
            },
            frames: motion.frames[w[0]..w[1]].to_vec(),
        })
        .collect()
}
