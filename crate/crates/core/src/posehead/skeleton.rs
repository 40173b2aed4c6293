//! Fixed 21-joint hand kinematic tree and its forward kinematics.
//!
//! Canonical frame: wrist at the origin, fingers extend along +y, the palm
//! lies in the x-y plane and the back of the hand faces +z. Lengths are in
//! model units (wrist to middle fingertip is about 0.94).

use serde::Serialize;

use crate::scalar::Scalar;

use super::geometry::{axis_rotation, axis_rotation_derivative, identity, mat_mul, mat_vec, transpose, Mat3, Vec3};

pub const NUM_JOINTS: usize = 21;
pub const NUM_BONES: usize = NUM_JOINTS - 1;
/// Abduction + three flexions for each of five fingers.
pub const NUM_DOF: usize = 20;

/// Degrees of freedom driven by one joint's local rotation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum JointDof {
    None,
    /// Single flexion angle (theta index, axis in the parent frame).
    Hinge { theta: usize, axis: [f64; 3] },
    /// Abduction followed by flexion: `L = R(abd_axis, a) R(flex_axis, f)`.
    Saddle { abduction: usize, flexion: usize, abd_axis: [f64; 3], flex_axis: [f64; 3] },
}

#[derive(Clone, Debug, Serialize)]
pub struct JointSpec {
    pub name: &'static str,
    pub parent: Option<usize>,
    /// Bone from the parent joint to this joint in the rest pose.
    pub rest: [f64; 3],
    pub dof: JointDof,
}

#[derive(Clone, Debug, Serialize)]
pub struct Skeleton {
    pub joints: Vec<JointSpec>,
}

const FINGERS: [&str; 5] = ["thumb", "index", "middle", "ring", "pinky"];
const SEGMENTS: [&str; 4] = ["mcp", "pip", "dip", "tip"];

/// (base offset from wrist, finger direction, three phalanx lengths)
#[allow(clippy::type_complexity)]
const FINGER_TABLE: [([f64; 3], [f64; 2], [f64; 3]); 5] = [
    ([0.16, 0.12, 0.0], [0.7071, 0.7071], [0.20, 0.15, 0.12]),
    ([0.12, 0.42, 0.0], [0.0995, 0.9950], [0.22, 0.13, 0.10]),
    ([0.00, 0.44, 0.0], [0.0, 1.0], [0.24, 0.15, 0.11]),
    ([-0.11, 0.41, 0.0], [-0.0797, 0.9968], [0.22, 0.14, 0.10]),
    ([-0.21, 0.36, 0.0], [-0.1771, 0.9842], [0.17, 0.11, 0.09]),
];

impl Skeleton {
    /// The shipped hand model. Joint order: wrist, then for each finger
    /// (thumb, index, middle, ring, pinky) the mcp, pip, dip and tip joints.
    pub fn hand() -> Self {
        let mut joints = vec![JointSpec { name: "wrist", parent: None, rest: [0.0; 3], dof: JointDof::None }];
        for (f, (base, dir, lengths)) in FINGER_TABLE.iter().enumerate() {
            let len = (dir[0] * dir[0] + dir[1] * dir[1]).sqrt();
            let d = [dir[0] / len, dir[1] / len, 0.0];
            // Flexion bends the finger toward the palm side (-z); the axis is
            // in-plane and perpendicular to the finger direction.
            let flex_axis = [-d[1], d[0], 0.0];
            let abd_axis = [0.0, 0.0, 1.0];
            for (s, seg) in SEGMENTS.iter().enumerate() {
                let idx = 1 + 4 * f + s;
                let parent = if s == 0 { 0 } else { idx - 1 };
                let rest = if s == 0 {
                    *base
                } else {
                    let l = lengths[s - 1];
                    [d[0] * l, d[1] * l, 0.0]
                };
                let dof = match s {
                    0 => JointDof::Saddle { abduction: 4 * f, flexion: 4 * f + 1, abd_axis, flex_axis },
                    1 | 2 => JointDof::Hinge { theta: 4 * f + s + 1, axis: flex_axis },
                    _ => JointDof::None,
                };
                joints.push(JointSpec { name: leak_name(FINGERS[f], seg), parent: Some(parent), rest, dof });
            }
        }
        Skeleton { joints }
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    /// Single root, parents precede children, positive bone lengths.
    pub fn is_valid(&self) -> bool {
        let roots = self.joints.iter().filter(|j| j.parent.is_none()).count();
        roots == 1
            && self.joints.len() == NUM_JOINTS
            && self.joints.iter().enumerate().all(|(i, j)| match j.parent {
                None => i == 0,
                Some(p) => p < i && j.rest.iter().map(|v| v * v).sum::<f64>() > 0.0,
            })
    }

    pub fn rest_length(&self, joint: usize) -> f64 {
        self.joints[joint].rest.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Joints in the subtree rooted at `joint` (inclusive).
    pub fn subtree(&self, joint: usize) -> Vec<usize> {
        let mut inside = vec![false; self.len()];
        inside[joint] = true;
        for i in joint + 1..self.len() {
            if let Some(p) = self.joints[i].parent {
                inside[i] = inside[p];
            }
        }
        (0..self.len()).filter(|&i| inside[i]).collect()
    }
}

fn leak_name(finger: &str, seg: &str) -> &'static str {
    // 20 short names, built once per process.
    use std::sync::OnceLock;
    static NAMES: OnceLock<Vec<String>> = OnceLock::new();
    let names = NAMES.get_or_init(|| {
        FINGERS.iter().flat_map(|f| SEGMENTS.iter().map(move |s| format!("{f}_{s}"))).collect()
    });
    let key = format!("{finger}_{seg}");
    names.iter().find(|n| **n == key).map(|s| s.as_str()).expect("known joint name")
}

fn to_vec3<T: Scalar>(v: &[f64; 3]) -> Vec3<T> {
    [T::lit(v[0]), T::lit(v[1]), T::lit(v[2])]
}

fn local_rotation<T: Scalar>(dof: &JointDof, theta: &[T]) -> Mat3<T> {
    match *dof {
        JointDof::None => identity(),
        JointDof::Hinge { theta: k, axis } => axis_rotation(&to_vec3(&axis), theta[k]),
        JointDof::Saddle { abduction, flexion, abd_axis, flex_axis } => mat_mul(
            &axis_rotation(&to_vec3(&abd_axis), theta[abduction]),
            &axis_rotation(&to_vec3(&flex_axis), theta[flexion]),
        ),
    }
}

/// Forward pass intermediates reused by the gradient.
pub(crate) struct FkTrace<T> {
    pub positions: Vec<Vec3<T>>,
    pub globals: Vec<Mat3<T>>,
    pub locals: Vec<Mat3<T>>,
}

pub(crate) fn fk_trace<T: Scalar>(skel: &Skeleton, theta: &[T], beta: &[T]) -> FkTrace<T> {
    let n = skel.len();
    let mut positions = vec![[T::zero(); 3]; n];
    let mut globals = vec![identity(); n];
    let mut locals = vec![identity(); n];
    for (i, joint) in skel.joints.iter().enumerate() {
        locals[i] = local_rotation(&joint.dof, theta);
        if let Some(p) = joint.parent {
            let scale = beta[i - 1];
            let rest = to_vec3::<T>(&joint.rest);
            let bone = mat_vec(&globals[p], &[rest[0] * scale, rest[1] * scale, rest[2] * scale]);
            positions[i] = [positions[p][0] + bone[0], positions[p][1] + bone[1], positions[p][2] + bone[2]];
            globals[i] = mat_mul(&globals[p], &locals[i]);
        }
    }
    FkTrace { positions, globals, locals }
}

/// Joint positions for pose angles `theta` (length [`NUM_DOF`]) and per-bone
/// scales `beta` (length [`NUM_BONES`], bone `b` ends at joint `b + 1`).
pub fn forward_kinematics<T: Scalar>(skel: &Skeleton, theta: &[T], beta: &[T]) -> Vec<Vec3<T>> {
    fk_trace(skel, theta, beta).positions
}

/// Reverse-mode gradient of [`forward_kinematics`]: given `d loss / d position`
/// accumulates into `g_theta` and `g_beta`.
pub(crate) fn fk_backward<T: Scalar>(
    skel: &Skeleton,
    theta: &[T],
    beta: &[T],
    trace: &FkTrace<T>,
    g_pos: &[Vec3<T>],
    g_theta: &mut [T],
    g_beta: &mut [T],
) {
    let n = skel.len();
    let mut gp: Vec<Vec3<T>> = g_pos.to_vec();
    let mut gg: Vec<Mat3<T>> = vec![[[T::zero(); 3]; 3]; n];
    for i in (1..n).rev() {
        let joint = &skel.joints[i];
        let p = joint.parent.expect("non-root joint has a parent");
        let rest = to_vec3::<T>(&joint.rest);
        let scale = beta[i - 1];
        let v = [rest[0] * scale, rest[1] * scale, rest[2] * scale];
        let gpos = gp[i];
        // position_i = position_p + G_p v
        for a in 0..3 {
            gp[p][a] += gpos[a];
            for b in 0..3 {
                gg[p][a][b] += gpos[a] * v[b];
            }
        }
        let gv = mat_vec(&transpose(&trace.globals[p]), &gpos);
        g_beta[i - 1] += gv[0] * rest[0] + gv[1] * rest[1] + gv[2] * rest[2];
        // G_i = G_p L_i
        let gi = gg[i];
        let gl = mat_mul(&transpose(&trace.globals[p]), &gi);
        let from_child = mat_mul(&gi, &transpose(&trace.locals[i]));
        for a in 0..3 {
            for b in 0..3 {
                gg[p][a][b] += from_child[a][b];
            }
        }
        let contract = |d: &Mat3<T>| -> T {
            let mut s = T::zero();
            for a in 0..3 {
                for b in 0..3 {
                    s += gl[a][b] * d[a][b];
                }
            }
            s
        };
        match joint.dof {
            JointDof::None => {}
            JointDof::Hinge { theta: k, axis } => {
                g_theta[k] += contract(&axis_rotation_derivative(&to_vec3(&axis), theta[k]));
            }
            JointDof::Saddle { abduction, flexion, abd_axis, flex_axis } => {
                let (aa, fa) = (to_vec3(&abd_axis), to_vec3(&flex_axis));
                let ra = axis_rotation(&aa, theta[abduction]);
                let rf = axis_rotation(&fa, theta[flexion]);
                let da = mat_mul(&axis_rotation_derivative(&aa, theta[abduction]), &rf);
                let df = mat_mul(&ra, &axis_rotation_derivative(&fa, theta[flexion]));
                g_theta[abduction] += contract(&da);
                g_theta[flexion] += contract(&df);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(a: &Vec3<f64>, b: &Vec3<f64>) -> f64 {
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
    }

    #[test]
    fn hand_table_is_well_formed() {
        let skel = Skeleton::hand();
        assert!(skel.is_valid());
        let dofs: Vec<usize> = skel
            .joints
            .iter()
            .flat_map(|j| match j.dof {
                JointDof::None => vec![],
                JointDof::Hinge { theta, .. } => vec![theta],
                JointDof::Saddle { abduction, flexion, .. } => vec![abduction, flexion],
            })
            .collect();
        let mut sorted = dofs.clone();
        sorted.sort();
        assert_eq!(sorted, (0..NUM_DOF).collect::<Vec<_>>());
    }

    #[test]
    fn rest_pose_is_cumulative_rest_vectors() {
        let skel = Skeleton::hand();
        let pos = forward_kinematics(&skel, &[0.0f64; NUM_DOF], &[1.0; NUM_BONES]);
        for (i, j) in skel.joints.iter().enumerate().skip(1) {
            let p = j.parent.unwrap();
            for a in 0..3 {
                assert_eq!(pos[i][a], pos[p][a] + j.rest[a]);
            }
        }
    }

    #[test]
    fn flexing_mcp_moves_only_its_subtree() {
        let skel = Skeleton::hand();
        let beta = [1.0f64; NUM_BONES];
        let rest = forward_kinematics(&skel, &[0.0; NUM_DOF], &beta);
        let mut theta = [0.0; NUM_DOF];
        theta[4 * 2 + 1] = std::f64::consts::FRAC_PI_2; // middle finger mcp flexion
        let bent = forward_kinematics(&skel, &theta, &beta);
        let moved: Vec<usize> = skel.subtree(9).into_iter().filter(|&j| j != 9).collect();
        for i in 0..NUM_JOINTS {
            let d = dist(&rest[i], &bent[i]);
            if moved.contains(&i) {
                assert!(d > 1e-3, "joint {i} should move");
            } else {
                assert!(d < 1e-12, "joint {i} moved by {d}");
            }
        }
        // Rigid motion inside the moved subtree: pairwise distances preserved.
        let sub = skel.subtree(9);
        for &a in &sub {
            for &b in &sub {
                assert!((dist(&rest[a], &rest[b]) - dist(&bent[a], &bent[b])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_beta_scales_distances_from_wrist() {
        let skel = Skeleton::hand();
        let theta: Vec<f64> = (0..NUM_DOF).map(|i| (i as f64 * 0.37).sin() * 0.8).collect();
        let one = forward_kinematics(&skel, &theta, &[1.0; NUM_BONES]);
        let two = forward_kinematics(&skel, &theta, &[2.0; NUM_BONES]);
        for i in 0..NUM_JOINTS {
            assert!((dist(&two[i], &two[0]) - 2.0 * dist(&one[i], &one[0])).abs() < 1e-12);
        }
    }
}
