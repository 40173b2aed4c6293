//! Dense layers, column slicing and temperature softmax.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::tape::{Backward, BackwardCtx, Tape, Var};
use super::Tensor;

struct LinearOp {
    x: Var,
    w: Var,
    b: Var,
}

impl<T: Scalar> Backward<T> for LinearOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_, T>, _out: Var, grad: &[T]) {
        let (n, din) = (ctx.value(self.x).dim(0), ctx.value(self.x).dim(1));
        let dout = ctx.value(self.w).dim(0);
        if ctx.wants(self.x) {
            // dx = dy (n x dout) * W (dout x din)
            let (w, gx) = ctx.value_and_grad(self.w, self.x);
            T::gemm(n, dout, din, T::one(), grad, dout as isize, 1, w.data(), din as isize, 1, T::one(), gx, din as isize, 1);
        }
        if ctx.wants(self.w) {
            // dW = dy^T (dout x n) * x (n x din)
            let (x, gw) = ctx.value_and_grad(self.x, self.w);
            T::gemm(dout, n, din, T::one(), grad, 1, dout as isize, x.data(), din as isize, 1, T::one(), gw, din as isize, 1);
        }
        if ctx.wants(self.b) {
            let gb = ctx.grad(self.b);
            for row in grad.chunks(dout) {
                for (g, &d) in gb.iter_mut().zip(row) {
                    *g += d;
                }
            }
        }
    }
}

struct NarrowOp {
    input: Var,
    start: usize,
}

impl<T: Scalar> Backward<T> for NarrowOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_, T>, out: Var, grad: &[T]) {
        if !ctx.wants(self.input) {
            return;
        }
        let len = ctx.value(out).dim(1);
        let width = ctx.value(self.input).dim(1);
        let gi = ctx.grad(self.input);
        for (r, row) in grad.chunks(len).enumerate() {
            for (g, &d) in gi[r * width + self.start..r * width + self.start + len].iter_mut().zip(row) {
                *g += d;
            }
        }
    }
}

struct PickOp {
    input: Var,
    index: Vec<usize>,
}

impl<T: Scalar> Backward<T> for PickOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_, T>, _out: Var, grad: &[T]) {
        if !ctx.wants(self.input) {
            return;
        }
        let width = ctx.value(self.input).dim(1);
        let gi = ctx.grad(self.input);
        for (r, (&k, &d)) in self.index.iter().zip(grad).enumerate() {
            gi[r * width + k] += d;
        }
    }
}

struct SoftmaxOp<T> {
    input: Var,
    tau: T,
    log: bool,
}

impl<T: Scalar> Backward<T> for SoftmaxOp<T> {
    fn backward(&self, ctx: &mut BackwardCtx<'_, T>, out: Var, grad: &[T]) {
        if !ctx.wants(self.input) {
            return;
        }
        let (y, gi) = ctx.value_and_grad(out, self.input);
        let k = y.dim(1);
        for ((yr, gr), gir) in y.data().chunks(k).zip(grad.chunks(k)).zip(gi.chunks_mut(k)) {
            if self.log {
                // d/dz of log p_i = (delta_ij - p_j) / tau
                let gsum: T = gr.iter().copied().sum();
                for ((gi, &g), &ly) in gir.iter_mut().zip(gr).zip(yr) {
                    *gi += (g - ly.exp() * gsum) / self.tau;
                }
            } else {
                let dot: T = gr.iter().zip(yr).map(|(&g, &p)| g * p).sum();
                for ((gi, &g), &p) in gir.iter_mut().zip(gr).zip(yr) {
                    *gi += p * (g - dot) / self.tau;
                }
            }
        }
    }
}

/// Row-wise softmax of `z / tau` with max subtraction.
pub fn softmax_temperature<T: Scalar>(z: &[T], tau: T) -> Vec<T> {
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = z.iter().map(|&v| ((v - m) / tau).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_softmax_temperature<T: Scalar>(z: &[T], tau: T) -> Vec<T> {
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = z.iter().map(|&v| ((v - m) / tau).exp()).sum::<T>().ln();
    z.iter().map(|&v| (v - m) / tau - lse).collect()
}

impl<T: Scalar> Tape<T> {
    /// `y = x W^T + b` for `x: (N, in)`, `W: (out, in)`, `b: (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.rank() != 2 || wv.rank() != 2 {
            return Err(Error::shape(
                "linear",
                format!("expected 2-d input and weight, got {:?} and {:?}", xv.shape(), wv.shape()),
            ));
        }
        let (n, din, dout) = (xv.dim(0), xv.dim(1), wv.dim(0));
        if wv.dim(1) != din {
            return Err(Error::shape(
                "linear",
                format!("input features {din} do not match weight in-features {}", wv.dim(1)),
            ));
        }
        if bv.shape() != [dout] {
            return Err(Error::shape("linear", format!("bias shape {:?} != [{dout}]", bv.shape())));
        }
        let mut out = Vec::with_capacity(n * dout);
        for _ in 0..n {
            out.extend_from_slice(bv.data());
        }
        T::gemm(n, din, dout, T::one(), xv.data(), din as isize, 1, wv.data(), 1, din as isize, T::one(), &mut out, dout as isize, 1);
        let value = Tensor::new([n, dout], out)?;
        Ok(self.push(value, &[x, w, b], LinearOp { x, w, b }))
    }

    /// Columns `start..start+len` of a 2-d tensor.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || start + len > xv.dim(1) || len == 0 {
            return Err(Error::shape(
                "narrow",
                format!("columns {start}..{} out of range for {:?}", start + len, xv.shape()),
            ));
        }
        let n = xv.dim(0);
        let mut data = Vec::with_capacity(n * len);
        for r in 0..n {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let value = Tensor::new([n, len], data)?;
        Ok(self.push(value, &[x], NarrowOp { input: x, start }))
    }

    /// `out[r] = x[r, index[r]]`.
    pub fn pick(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || index.len() != xv.dim(0) || index.iter().any(|&k| k >= xv.dim(1)) {
            return Err(Error::shape("pick", format!("bad index set for {:?}", xv.shape())));
        }
        let value = Tensor::from_fn([index.len()], |r| xv.row(r)[index[r]]);
        Ok(self.push(value, &[x], PickOp { input: x, index: index.to_vec() }))
    }

    fn softmax_rows(&mut self, x: Var, tau: T, log: bool) -> Result<Var> {
        if !(tau > T::zero()) {
            return Err(Error::arg("softmax_temperature", format!("temperature must be > 0, got {tau}")));
        }
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(Error::shape("softmax_temperature", format!("expected 2-d logits, got {:?}", xv.shape())));
        }
        let k = xv.dim(1);
        let mut data = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(k) {
            if log {
                data.extend(log_softmax_temperature(row, tau));
            } else {
                data.extend(softmax_temperature(row, tau));
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(value, &[x], SoftmaxOp { input: x, tau, log }))
    }

    /// Row-wise `softmax(z / tau)` of a `(N, K)` tensor.
    pub fn softmax_temperature(&mut self, x: Var, tau: T) -> Result<Var> {
        self.softmax_rows(x, tau, false)
    }

    pub fn log_softmax_temperature(&mut self, x: Var, tau: T) -> Result<Var> {
        self.softmax_rows(x, tau, true)
    }
}
