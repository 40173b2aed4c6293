//! Pose predictor, kinematic hand model, weak-perspective projection and
//! keypoint losses.

pub mod geometry;
mod loss;
mod ops;
pub mod skeleton;

use std::sync::Arc;

use rand::Rng;

use crate::diff::{Tape, Var};
use crate::error::Result;
use crate::nn::{Bound, Dense, Group, ParamStore};
use crate::scalar::Scalar;

pub use loss::{loss_2d, loss_3d, pose_loss, regularizer, RegWeights};
pub use ops::project_points;
pub use skeleton::{forward_kinematics, JointDof, JointSpec, Skeleton, NUM_BONES, NUM_DOF, NUM_JOINTS};

/// Layout of the pose vector: `theta | beta | axis-angle | t | s`.
pub const THETA: std::ops::Range<usize> = 0..NUM_DOF;
pub const BETA: std::ops::Range<usize> = NUM_DOF..NUM_DOF + NUM_BONES;
pub const ROT: std::ops::Range<usize> = BETA.end..BETA.end + 3;
pub const TRANS: std::ops::Range<usize> = ROT.end..ROT.end + 2;
pub const SCALE: usize = TRANS.end;
pub const POSE_DIM: usize = SCALE + 1;

pub const BETA_MIN: f64 = 0.5;
pub const BETA_MAX: f64 = 2.0;

/// Decoded pose of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseParams<T> {
    pub theta: Vec<T>,
    pub beta: Vec<T>,
    pub axis_angle: [T; 3],
    pub t: [T; 2],
    pub s: T,
}

impl<T: Scalar> PoseParams<T> {
    pub fn rest() -> Self {
        PoseParams {
            theta: vec![T::zero(); NUM_DOF],
            beta: vec![T::one(); NUM_BONES],
            axis_angle: [T::zero(); 3],
            t: [T::zero(); 2],
            s: T::one(),
        }
    }

    pub fn to_vector(&self) -> Vec<T> {
        let mut v = Vec::with_capacity(POSE_DIM);
        v.extend_from_slice(&self.theta);
        v.extend_from_slice(&self.beta);
        v.extend_from_slice(&self.axis_angle);
        v.extend_from_slice(&self.t);
        v.push(self.s);
        v
    }

    pub fn from_vector(v: &[T]) -> Self {
        assert_eq!(v.len(), POSE_DIM, "pose vector length");
        PoseParams {
            theta: v[THETA].to_vec(),
            beta: v[BETA].to_vec(),
            axis_angle: [v[ROT.start], v[ROT.start + 1], v[ROT.start + 2]],
            t: [v[TRANS.start], v[TRANS.start + 1]],
            s: v[SCALE],
        }
    }

    pub fn rotation(&self) -> geometry::Mat3<T> {
        geometry::rodrigues(&self.axis_angle)
    }

    /// `(J3D, J2D)` flattened row-major.
    pub fn joints(&self, skeleton: &Skeleton) -> (Vec<T>, Vec<T>) {
        let j3 = forward_kinematics(skeleton, &self.theta, &self.beta);
        let j2 = project_points(&j3, &self.rotation(), self.t, self.s);
        (j3.into_iter().flatten().collect(), j2.into_iter().flatten().collect())
    }
}

/// Tape handles of a decoded batch of poses.
#[derive(Clone, Copy, Debug)]
pub struct PoseVars {
    pub raw: Var,
    pub theta: Var,
    pub beta: Var,
    pub rot: Var,
    pub t: Var,
    pub s: Var,
    /// `(N, 21, 3)` in the hand frame.
    pub joints_3d: Var,
    /// `(N, 21, 2)` in pixels.
    pub joints_2d: Var,
}

/// Two fully connected layers mapping an RF latent to pose, shape and camera.
#[derive(Clone, Debug)]
pub struct PosePredictor {
    pub fc1: Dense,
    pub fc2: Dense,
    /// Pixels per unit of the raw translation output.
    pub translation_scale: f64,
    pub skeleton: Arc<Skeleton>,
}

impl PosePredictor {
    /// The output bias starts at the image centre with a scale of
    /// `0.35 * image_size` pixels per model unit.
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        latent: usize,
        fc_width: usize,
        image_size: usize,
    ) -> Self {
        let fc1 = Dense::new(store, rng, "pose.fc1", Group::PoseHead, latent, fc_width);
        let fc2 = Dense::new(store, rng, "pose.fc2", Group::PoseHead, fc_width, POSE_DIM);
        let translation_scale = image_size as f64 / 2.0;
        let bias = store.get_mut(fc2.bias).data_mut();
        bias[TRANS.start] = T::one();
        bias[TRANS.start + 1] = T::one();
        bias[SCALE] = T::lit((0.35 * image_size as f64).ln());
        // Small output weights keep the initial prediction near the bias pose.
        for w in store.get_mut(fc2.weight).data_mut() {
            *w *= T::lit(0.1);
        }
        PosePredictor { fc1, fc2, translation_scale, skeleton: Arc::new(Skeleton::hand()) }
    }

    /// Raw `(N, 46)` output vector.
    pub fn raw<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, latent: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, p, latent)?;
        let h = tape.relu(h);
        self.fc2.forward(tape, p, h)
    }

    /// Splits a raw vector: `beta = clamp(1 + raw)`, `s = exp(raw)`,
    /// `t = translation_scale * raw`.
    pub fn decode<T: Scalar>(&self, tape: &mut Tape<T>, raw: Var) -> Result<PoseVars> {
        let theta = tape.narrow(raw, THETA.start, NUM_DOF)?;
        let b = tape.narrow(raw, BETA.start, NUM_BONES)?;
        let b = tape.shift(b, T::one());
        let beta = tape.clamp(b, T::lit(BETA_MIN), T::lit(BETA_MAX));
        let aa = tape.narrow(raw, ROT.start, 3)?;
        let rot = tape.rodrigues(aa)?;
        let t = tape.narrow(raw, TRANS.start, 2)?;
        let t = tape.scale(t, T::lit(self.translation_scale));
        let s = tape.narrow(raw, SCALE, 1)?;
        let s = tape.exp(s);
        let joints_3d = tape.forward_kinematics(&self.skeleton, theta, beta)?;
        let joints_2d = tape.project_weak_perspective(joints_3d, rot, t, s)?;
        Ok(PoseVars { raw, theta, beta, rot, t, s, joints_3d, joints_2d })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, latent: Var) -> Result<PoseVars> {
        let raw = self.raw(tape, p, latent)?;
        self.decode(tape, raw)
    }

    /// Decoded parameters of row `i` of a forward pass.
    pub fn params<T: Scalar>(&self, tape: &Tape<T>, vars: &PoseVars, i: usize) -> PoseParams<T> {
        let theta = tape.value(vars.theta).row(i).to_vec();
        let beta = tape.value(vars.beta).row(i).to_vec();
        let raw = tape.value(vars.raw).row(i);
        let t = tape.value(vars.t).row(i);
        PoseParams {
            theta,
            beta,
            axis_angle: [raw[ROT.start], raw[ROT.start + 1], raw[ROT.start + 2]],
            t: [t[0], t[1]],
            s: tape.value(vars.s).row(i)[0],
        }
    }
}
