//! Kinematic tree of the synthetic 16-joint body.
//!
//! Joint order follows the common 16-joint Human3.6M layout. Poses are stored
//! joint-major: `[x0, y0, z0, x1, y1, z1, ...]` in metres. The body frame
//! uses image-style axes (x right, y down, z away from the camera).

use nalgebra::{Rotation3, Vector3};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Angle ranges (radians) for the local rotation of one bone about x, y, z.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AngleRange {
    pub x: (f64, f64),
    pub y: (f64, f64),
    pub z: (f64, f64),
}

impl AngleRange {
    pub const FIXED: AngleRange = AngleRange { x: (0.0, 0.0), y: (0.0, 0.0), z: (0.0, 0.0) };

    fn sample(&self, rng: &mut Rng) -> Rotation3<f64> {
        let draw = |rng: &mut Rng, (lo, hi): (f64, f64)| if hi > lo { rng.random_range(lo..hi) } else { lo };
        let ax = draw(rng, self.x);
        let ay = draw(rng, self.y);
        let az = draw(rng, self.z);
        Rotation3::from_euler_angles(ax, ay, az)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    pub names: Vec<String>,
    /// Parent of each joint; `None` only for the root.
    pub parents: Vec<Option<usize>>,
    /// Joints whose heatmap coefficients are dropped from the condition.
    pub hips: Vec<usize>,
    /// Rest direction of the bone ending at each joint (unit, body frame).
    pub rest_dirs: Vec<[f64; 3]>,
    /// Length in metres of the bone ending at each joint (0 for the root).
    pub bone_lengths: Vec<f64>,
    /// Local articulation range of the bone ending at each joint.
    pub ranges: Vec<AngleRange>,
}

impl Skeleton {
    /// 16-joint body with average adult proportions.
    pub fn human16() -> Self {
        use std::f64::consts::PI;
        let fixed = AngleRange::FIXED;
        let thigh = AngleRange { x: (-1.3, 0.5), y: (-0.3, 0.3), z: (-0.4, 0.4) };
        let shin = AngleRange { x: (0.0, 1.6), y: (0.0, 0.0), z: (-0.1, 0.1) };
        let spine = AngleRange { x: (-0.4, 0.2), y: (-0.3, 0.3), z: (-0.2, 0.2) };
        let neck = AngleRange { x: (-0.5, 0.4), y: (-0.5, 0.5), z: (-0.3, 0.3) };
        let shoulder = AngleRange { x: (-0.1, 0.1), y: (-0.1, 0.1), z: (-0.15, 0.15) };
        let upper_arm = AngleRange { x: (-PI * 0.6, PI * 0.5), y: (-0.5, 0.5), z: (-1.4, 1.4) };
        let forearm = AngleRange { x: (-2.2, 0.0), y: (0.0, 0.0), z: (-0.2, 0.2) };
        #[rustfmt::skip]
        let table: [(&str, Option<usize>, [f64; 3], f64, AngleRange); 16] = [
            ("pelvis",      None,     [0.0, 0.0, 0.0],  0.0,  fixed),
            ("r_hip",       Some(0),  [-1.0, 0.0, 0.0], 0.13, fixed),
            ("r_knee",      Some(1),  [0.0, 1.0, 0.0],  0.45, thigh),
            ("r_ankle",     Some(2),  [0.0, 1.0, 0.0],  0.44, shin),
            ("l_hip",       Some(0),  [1.0, 0.0, 0.0],  0.13, fixed),
            ("l_knee",      Some(4),  [0.0, 1.0, 0.0],  0.45, thigh),
            ("l_ankle",     Some(5),  [0.0, 1.0, 0.0],  0.44, shin),
            ("spine",       Some(0),  [0.0, -1.0, 0.0], 0.23, spine),
            ("thorax",      Some(7),  [0.0, -1.0, 0.0], 0.25, spine),
            ("head",        Some(8),  [0.0, -1.0, 0.0], 0.20, neck),
            ("l_shoulder",  Some(8),  [1.0, 0.0, 0.0],  0.15, shoulder),
            ("l_elbow",     Some(10), [0.0, 1.0, 0.0],  0.28, upper_arm),
            ("l_wrist",     Some(11), [0.0, 1.0, 0.0],  0.25, forearm),
            ("r_shoulder",  Some(8),  [-1.0, 0.0, 0.0], 0.15, shoulder),
            ("r_elbow",     Some(13), [0.0, 1.0, 0.0],  0.28, upper_arm),
            ("r_wrist",     Some(14), [0.0, 1.0, 0.0],  0.25, forearm),
        ];
        Self {
            names: table.iter().map(|t| t.0.to_string()).collect(),
            parents: table.iter().map(|t| t.1).collect(),
            hips: vec![0, 1, 4],
            rest_dirs: table.iter().map(|t| t.2).collect(),
            bone_lengths: table.iter().map(|t| t.3).collect(),
            ranges: table.iter().map(|t| t.4).collect(),
        }
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    /// `(parent, child)` for every bone, ordered by child index.
    pub fn bones(&self) -> Vec<(usize, usize)> {
        self.parents.iter().enumerate().filter_map(|(c, p)| p.map(|p| (p, c))).collect()
    }

    pub fn root(&self) -> usize {
        self.parents.iter().position(Option::is_none).unwrap_or(0)
    }

    /// Checks tree structure, bone lengths and hip indices.
    pub fn validate(&self) -> Result<()> {
        let j = self.joint_count();
        if [self.names.len(), self.rest_dirs.len(), self.bone_lengths.len(), self.ranges.len()]
            .iter()
            .any(|&n| n != j)
        {
            return Err(Error::invalid("skeleton tables have inconsistent lengths"));
        }
        if self.parents.iter().filter(|p| p.is_none()).count() != 1 {
            return Err(Error::invalid("skeleton must have exactly one root"));
        }
        for (c, p) in self.parents.iter().enumerate() {
            if let Some(p) = *p {
                // Parents precede children, which also rules out cycles.
                if p >= c {
                    return Err(Error::invalid(format!("joint {c} has parent {p} that does not precede it")));
                }
                if !(self.bone_lengths[c] > 0.0) {
                    return Err(Error::invalid(format!("bone ending at joint {c} has length {}", self.bone_lengths[c])));
                }
            }
        }
        if self.hips.iter().any(|&h| h >= j) {
            return Err(Error::invalid("hip index out of range"));
        }
        Ok(())
    }

    /// Root-at-origin pose articulated by random local rotations and a random
    /// global orientation (full turn about the vertical axis, slight tilt).
    pub fn sample_pose(&self, rng: &mut Rng) -> Vec<f64> {
        use std::f64::consts::PI;
        let j = self.joint_count();
        let yaw = rng.random_range(-PI..PI);
        let tilt_x = rng.random_range(-0.2..0.2);
        let tilt_z = rng.random_range(-0.2..0.2);
        let body = Rotation3::from_euler_angles(tilt_x, yaw, tilt_z);
        let mut global: Vec<Rotation3<f64>> = vec![body; j];
        let mut pos = vec![Vector3::zeros(); j];
        for c in 0..j {
            let Some(p) = self.parents[c] else { continue };
            let parent_rot = if self.parents[p].is_some() { global[p] } else { body };
            let rot = parent_rot * self.ranges[c].sample(rng);
            global[c] = rot;
            let d = self.rest_dirs[c];
            pos[c] = pos[p] + rot * Vector3::new(d[0], d[1], d[2]) * self.bone_lengths[c];
        }
        pos.iter().flat_map(|v| [v.x, v.y, v.z]).collect()
    }

    /// Length of every bone in a pose, ordered like [`Skeleton::bones`].
    pub fn measure_bones(&self, pose: &[f64]) -> Vec<f64> {
        self.bones()
            .iter()
            .map(|&(p, c)| {
                let d: Vec<f64> = (0..3).map(|k| pose[3 * c + k] - pose[3 * p + k]).collect();
                d.iter().map(|v| v * v).sum::<f64>().sqrt()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn human16_is_valid() {
        let s = Skeleton::human16();
        s.validate().unwrap();
        assert_eq!(s.joint_count(), 16);
        assert_eq!(s.bones().len(), 15);
        assert_eq!(s.hips.len(), 3);
    }

    #[test]
    fn sampled_poses_keep_bone_lengths() {
        let s = Skeleton::human16();
        let mut r = rng::stream(3, "test", 0);
        let expected: Vec<f64> = s.bones().iter().map(|&(_, c)| s.bone_lengths[c]).collect();
        for _ in 0..50 {
            let pose = s.sample_pose(&mut r);
            for (a, b) in s.measure_bones(&pose).iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_lengths() {
        let mut s = Skeleton::human16();
        s.bone_lengths[3] = 0.0;
        assert!(s.validate().is_err());
    }
}
