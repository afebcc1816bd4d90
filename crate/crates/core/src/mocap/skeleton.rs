use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_JOINTS: usize = 15;
pub const NUM_SIGNALS: usize = NUM_JOINTS * 3;

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "head", "torso", "l_shl", "l_elb", "l_wrist", "r_shl", "r_elb", "r_wrist", "c_hip", "l_hip",
    "l_kne", "l_ank", "r_hip", "r_kne", "r_ank",
];

pub const AXES: [char; 3] = ['x', 'y', 'z'];

pub mod joint {
    pub const HEAD: usize = 0;
    pub const TORSO: usize = 1;
    pub const L_SHL: usize = 2;
    pub const L_ELB: usize = 3;
    pub const L_WRIST: usize = 4;
    pub const R_SHL: usize = 5;
    pub const R_ELB: usize = 6;
    pub const R_WRIST: usize = 7;
    pub const C_HIP: usize = 8;
    pub const L_HIP: usize = 9;
    pub const L_KNE: usize = 10;
    pub const L_ANK: usize = 11;
    pub const R_HIP: usize = 12;
    pub const R_KNE: usize = 13;
    pub const R_ANK: usize = 14;
}

/// Joint names, parent→child limbs and the joints the preprocessing relies on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkeletonTopology {
    pub joint_names: Vec<String>,
    pub limbs: Vec<(usize, usize)>,
    pub root: usize,
    pub left_hip: usize,
    pub right_hip: usize,
    pub right_ankle: usize,
}

impl Default for SkeletonTopology {
    fn default() -> Self {
        use joint::*;
        Self {
            joint_names: JOINT_NAMES.iter().map(|s| s.to_string()).collect(),
            limbs: vec![
                (C_HIP, TORSO),
                (TORSO, HEAD),
                (TORSO, L_SHL),
                (L_SHL, L_ELB),
                (L_ELB, L_WRIST),
                (TORSO, R_SHL),
                (R_SHL, R_ELB),
                (R_ELB, R_WRIST),
                (C_HIP, L_HIP),
                (L_HIP, L_KNE),
                (L_KNE, L_ANK),
                (C_HIP, R_HIP),
                (R_HIP, R_KNE),
                (R_KNE, R_ANK),
            ],
            root: C_HIP,
            left_hip: L_HIP,
            right_hip: R_HIP,
            right_ankle: R_ANK,
        }
    }
}

impl SkeletonTopology {
    /// Checks joint count, index bounds and that the limbs form a tree rooted
    /// at `root`, listed parent-before-child.
    pub fn validate(&self) -> Result<()> {
        if self.joint_names.len() != NUM_JOINTS {
            return Err(Error::invalid(format!(
                "skeleton must have {NUM_JOINTS} joints, got {}",
                self.joint_names.len()
            )));
        }
        for (i, name) in self.joint_names.iter().enumerate() {
            if self.joint_names[..i].contains(name) {
                return Err(Error::invalid(format!("duplicate joint name {name}")));
            }
        }
        let n = NUM_JOINTS;
        for &j in &[self.root, self.left_hip, self.right_hip, self.right_ankle] {
            if j >= n {
                return Err(Error::invalid(format!("joint index {j} out of range")));
            }
        }
        if self.left_hip == self.right_hip {
            return Err(Error::invalid("left and right hip must differ"));
        }
        if self.limbs.len() != n - 1 {
            return Err(Error::invalid(format!(
                "a {n}-joint tree needs {} limbs, got {}",
                n - 1,
                self.limbs.len()
            )));
        }
        let mut reached = vec![false; n];
        reached[self.root] = true;
        for &(p, c) in &self.limbs {
            if p >= n || c >= n {
                return Err(Error::invalid(format!("limb ({p}, {c}) out of range")));
            }
            if !reached[p] {
                return Err(Error::invalid(format!(
                    "limb {}->{} listed before its parent is reached",
                    self.joint_names[p], self.joint_names[c]
                )));
            }
            if reached[c] {
                return Err(Error::invalid(format!(
                    "joint {} has more than one parent",
                    self.joint_names[c]
                )));
            }
            reached[c] = true;
        }
        Ok(())
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joint_names.iter().position(|n| n == name)
    }

    pub fn limb_name(&self, limb: usize) -> String {
        let (p, c) = self.limbs[limb];
        format!("{}->{}", self.joint_names[p], self.joint_names[c])
    }

    /// Column name of signal `s` (joint-major, then axis).
    pub fn signal_name(&self, s: usize) -> String {
        format!("{}_{}", self.joint_names[s / 3], AXES[s % 3])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_tree() {
        let sk = SkeletonTopology::default();
        sk.validate().unwrap();
        assert_eq!(sk.joint_names[sk.root], "c_hip");
        assert_eq!(sk.signal_name(44), "r_ank_z");
    }

    #[test]
    fn rejects_cycle_and_orphans() {
        let mut sk = SkeletonTopology::default();
        sk.limbs.swap(0, 1);
        assert!(sk.validate().is_err());
        let mut sk = SkeletonTopology::default();
        sk.limbs[1] = (joint::L_SHL, joint::HEAD);
        assert!(sk.validate().is_err());
        let mut sk = SkeletonTopology::default();
        sk.joint_names.pop();
        assert!(sk.validate().is_err());
    }
}
