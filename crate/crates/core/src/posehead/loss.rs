//! Keypoint losses and the pose/shape prior.

use crate::diff::{smooth_l1, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Prior weights on joint angles and bone scales.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegWeights {
    pub theta: f64,
    pub beta: f64,
}

impl Default for RegWeights {
    fn default() -> Self {
        RegWeights { theta: 1e-3, beta: 1e-2 }
    }
}

/// Smooth-L1 over every 2D coordinate, averaged.
pub fn loss_2d<T: Scalar>(pred: &[T], gt: &[T]) -> T {
    let sum: T = pred.iter().zip(gt).map(|(&p, &g)| smooth_l1(p - g)).sum();
    sum / T::lit(pred.len() as f64)
}

/// Squared Euclidean error summed over coordinates, averaged over joints.
pub fn loss_3d<T: Scalar>(pred: &[T], gt: &[T]) -> T {
    let sum: T = pred.iter().zip(gt).map(|(&p, &g)| (p - g) * (p - g)).sum();
    sum / T::lit((pred.len() / 3) as f64)
}

/// `(L_2D, L_3D)` for one sample.
pub fn pose_loss<T: Scalar>(pred_2d: &[T], pred_3d: &[T], gt_2d: &[T], gt_3d: &[T]) -> (T, T) {
    (loss_2d(pred_2d, gt_2d), loss_3d(pred_3d, gt_3d))
}

pub fn regularizer<T: Scalar>(theta: &[T], beta: &[T], w: RegWeights) -> T {
    let t: T = theta.iter().map(|&v| v * v).sum();
    let b: T = beta.iter().map(|&v| (v - T::one()) * (v - T::one())).sum();
    T::lit(w.theta) * t + T::lit(w.beta) * b
}

fn check_same(tape: &Tape<impl Scalar>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(op, format!("{:?} vs {:?}", tape.shape(a), tape.shape(b))));
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    /// Batch mean of [`loss_2d`]; inputs `(N, K, 2)`.
    pub fn loss_2d(&mut self, pred: Var, gt: Var) -> Result<Var> {
        check_same(self, "loss_2d", pred, gt)?;
        let d = self.sub(pred, gt)?;
        let l = self.smooth_l1(d);
        Ok(self.mean_all(l))
    }

    /// Batch mean of [`loss_3d`]; inputs `(N, K, 3)`.
    pub fn loss_3d(&mut self, pred: Var, gt: Var) -> Result<Var> {
        check_same(self, "loss_3d", pred, gt)?;
        let shape = self.shape(pred).to_vec();
        let joints = shape[..shape.len() - 1].iter().product::<usize>();
        let d = self.sub(pred, gt)?;
        let sq = self.square(d);
        let s = self.sum_all(sq);
        Ok(self.scale(s, T::one() / T::lit(joints as f64)))
    }

    /// Batch mean of [`regularizer`]; `theta (N, _)`, `beta (N, _)`.
    pub fn pose_regularizer(&mut self, theta: Var, beta: Var, w: RegWeights) -> Result<Var> {
        let n = T::lit(self.shape(theta)[0] as f64);
        let t2 = self.square(theta);
        let t = self.sum_all(t2);
        let b1 = self.shift(beta, -T::one());
        let b2 = self.square(b1);
        let b = self.sum_all(b2);
        let t = self.scale(t, T::lit(w.theta) / n);
        let b = self.scale(b, T::lit(w.beta) / n);
        self.add(t, b)
    }
}
