//! Tape operations for kinematics, axis-angle conversion and projection.

use std::sync::Arc;

use crate::diff::{Backward, BackwardCtx, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::geometry::{rodrigues, rodrigues_jacobian, Mat3, Vec3};
use super::skeleton::{fk_backward, fk_trace, Skeleton, NUM_BONES, NUM_DOF, NUM_JOINTS};

struct FkOp {
    skeleton: Arc<Skeleton>,
    theta: Var,
    beta: Var,
}

impl<T: Scalar> Backward<T> for FkOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_, T>, _out: Var, grad: &[T]) {
        let theta = ctx.value(self.theta).clone();
        let beta = ctx.value(self.beta).clone();
        let n = theta.dim(0);
        let mut g_theta = vec![T::zero(); n * NUM_DOF];
        let mut g_beta = vec![T::zero(); n * NUM_BONES];
        for s in 0..n {
            let (th, be) = (theta.row(s), beta.row(s));
            let trace = fk_trace(&self.skeleton, th, be);
            let g_pos: Vec<Vec3<T>> = grad[s * NUM_JOINTS * 3..(s + 1) * NUM_JOINTS * 3]
                .chunks_exact(3)
                .map(|c| [c[0], c[1], c[2]])
                .collect();
            fk_backward(
                &self.skeleton,
                th,
                be,
                &trace,
                &g_pos,
                &mut g_theta[s * NUM_DOF..(s + 1) * NUM_DOF],
                &mut g_beta[s * NUM_BONES..(s + 1) * NUM_BONES],
            );
        }
        ctx.accumulate(self.theta, &g_theta);
        ctx.accumulate(self.beta, &g_beta);
    }
}

struct RodriguesOp {
    input: Var,
}

impl<T: Scalar> Backward<T> for RodriguesOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_, T>, _out: Var, grad: &[T]) {
        if !ctx.wants(self.input) {
            return;
        }
        let v = ctx.value(self.input).clone();
        let gi = ctx.grad(self.input);
        for s in 0..v.dim(0) {
            let r = v.row(s);
            let jac = rodrigues_jacobian(&[r[0], r[1], r[2]]);
            let g = &grad[s * 9..(s + 1) * 9];
            for (k, d) in jac.iter().enumerate() {
                let mut acc = T::zero();
                for a in 0..3 {
                    for b in 0..3 {
                        acc += g[a * 3 + b] * d[a][b];
                    }
                }
                gi[s * 3 + k] += acc;
            }
        }
    }
}

struct ProjectOp {
    joints: Var,
    rot: Var,
    t: Var,
    s: Var,
}

impl<T: Scalar> Backward<T> for ProjectOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_, T>, _out: Var, grad: &[T]) {
        let j = ctx.value(self.joints).clone();
        let r = ctx.value(self.rot).clone();
        let sc = ctx.value(self.s).clone();
        let (n, k) = (j.dim(0), j.dim(1));
        let mut gj = vec![T::zero(); j.len()];
        let mut gr = vec![T::zero(); r.len()];
        let mut gt = vec![T::zero(); n * 2];
        let mut gs = vec![T::zero(); n];
        for s in 0..n {
            let rm = &r.data()[s * 9..s * 9 + 9];
            let scale = sc.data()[s];
            for q in 0..k {
                let p = &j.data()[(s * k + q) * 3..(s * k + q) * 3 + 3];
                for a in 0..2 {
                    let g = grad[(s * k + q) * 2 + a];
                    let rp = rm[a * 3] * p[0] + rm[a * 3 + 1] * p[1] + rm[a * 3 + 2] * p[2];
                    gt[s * 2 + a] += g;
                    gs[s] += g * rp;
                    for b in 0..3 {
                        gr[s * 9 + a * 3 + b] += g * scale * p[b];
                        gj[(s * k + q) * 3 + b] += g * scale * rm[a * 3 + b];
                    }
                }
            }
        }
        ctx.accumulate(self.joints, &gj);
        ctx.accumulate(self.rot, &gr);
        ctx.accumulate(self.t, &gt);
        ctx.accumulate(self.s, &gs);
    }
}

fn expect_shape(op: &'static str, what: &str, got: &[usize], want: &[usize]) -> Result<()> {
    if got != want {
        return Err(Error::shape(op, format!("{what} expected {want:?}, got {got:?}")));
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    /// Batched forward kinematics: `theta (N, 20)`, `beta (N, 20)` to joints `(N, 21, 3)`.
    pub fn forward_kinematics(&mut self, skeleton: &Arc<Skeleton>, theta: Var, beta: Var) -> Result<Var> {
        let n = self.shape(theta).first().copied().unwrap_or(0);
        expect_shape("forward_kinematics", "theta", self.shape(theta), &[n, NUM_DOF])?;
        expect_shape("forward_kinematics", "beta", self.shape(beta), &[n, NUM_BONES])?;
        let (th, be) = (self.value(theta), self.value(beta));
        let mut out = Vec::with_capacity(n * NUM_JOINTS * 3);
        for s in 0..n {
            let trace = fk_trace(skeleton, th.row(s), be.row(s));
            out.extend(trace.positions.iter().flatten());
        }
        let value = Tensor::new([n, NUM_JOINTS, 3], out)?;
        Ok(self.push(value, &[theta, beta], FkOp { skeleton: skeleton.clone(), theta, beta }))
    }

    /// Axis-angle rows `(N, 3)` to rotation matrices `(N, 3, 3)`.
    pub fn rodrigues(&mut self, input: Var) -> Result<Var> {
        let n = self.shape(input).first().copied().unwrap_or(0);
        expect_shape("rodrigues", "axis-angle", self.shape(input), &[n, 3])?;
        let x = self.value(input);
        let mut out = Vec::with_capacity(n * 9);
        for s in 0..n {
            let r = x.row(s);
            let m: Mat3<T> = rodrigues(&[r[0], r[1], r[2]]);
            out.extend(m.iter().flatten());
        }
        let value = Tensor::new([n, 3, 3], out)?;
        Ok(self.push(value, &[input], RodriguesOp { input }))
    }

    /// Weak-perspective projection `s * Pi * R * J + t` of joints `(N, K, 3)`
    /// with `rot (N, 3, 3)`, `t (N, 2)`, `s (N, 1)`; returns `(N, K, 2)`.
    pub fn project_weak_perspective(&mut self, joints: Var, rot: Var, t: Var, s: Var) -> Result<Var> {
        let js = self.shape(joints).to_vec();
        if js.len() != 3 || js[2] != 3 {
            return Err(Error::shape("project_weak_perspective", format!("joints expected (N, K, 3), got {js:?}")));
        }
        let (n, k) = (js[0], js[1]);
        expect_shape("project_weak_perspective", "rotation", self.shape(rot), &[n, 3, 3])?;
        expect_shape("project_weak_perspective", "translation", self.shape(t), &[n, 2])?;
        expect_shape("project_weak_perspective", "scale", self.shape(s), &[n, 1])?;
        let (jv, rv, tv, sv) = (self.value(joints), self.value(rot), self.value(t), self.value(s));
        let mut out = Vec::with_capacity(n * k * 2);
        for b in 0..n {
            let rm = &rv.data()[b * 9..b * 9 + 9];
            for q in 0..k {
                let p = &jv.data()[(b * k + q) * 3..(b * k + q) * 3 + 3];
                for a in 0..2 {
                    let rp = rm[a * 3] * p[0] + rm[a * 3 + 1] * p[1] + rm[a * 3 + 2] * p[2];
                    out.push(sv.data()[b] * rp + tv.data()[b * 2 + a]);
                }
            }
        }
        let value = Tensor::new([n, k, 2], out)?;
        Ok(self.push(value, &[joints, rot, t, s], ProjectOp { joints, rot, t, s }))
    }
}

/// Single-sample projection on plain arrays.
pub fn project_points<T: Scalar>(joints: &[Vec3<T>], rot: &Mat3<T>, t: [T; 2], s: T) -> Vec<[T; 2]> {
    joints
        .iter()
        .map(|p| {
            let mut out = [T::zero(); 2];
            for a in 0..2 {
                out[a] = s * (rot[a][0] * p[0] + rot[a][1] * p[1] + rot[a][2] * p[2]) + t[a];
            }
            out
        })
        .collect()
}
