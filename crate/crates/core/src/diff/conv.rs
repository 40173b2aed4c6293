//! Convolution and pooling over NCHW tensors.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::tape::{Backward, BackwardCtx, Tape, Var};
use super::Tensor;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// Row length of the lowered matrix: one column per (sample, output pixel).
    fn columns(&self) -> usize {
        self.n * self.positions()
    }
}

/// Output extent of a strided window: `floor((size + 2 pad - k) / stride) + 1`.
pub fn conv_out_extent(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

fn im2col<T: Scalar>(x: &[T], g: &Geometry) -> Vec<T> {
    let cols = g.columns();
    let mut out = vec![T::zero(); g.patch() * cols];
    let p = g.positions();
    for c in 0..g.cin {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst_row = &mut out[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let plane = &x[(n * g.cin + c) * g.h * g.w..(n * g.cin + c + 1) * g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let dst = &mut dst_row[n * p + oy * g.wo..n * p + (oy + 1) * g.wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im<T: Scalar>(cols_grad: &[T], g: &Geometry, dx: &mut [T]) {
    let cols = g.columns();
    let p = g.positions();
    for c in 0..g.cin {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src_row = &cols_grad[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let base = (n * g.cin + c) * g.h * g.w;
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst = &mut dx[base + iy as usize * g.w..base + (iy as usize + 1) * g.w];
                        let src = &src_row[n * p + oy * g.wo..n * p + (oy + 1) * g.wo];
                        for (ox, &s) in src.iter().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

struct Conv2dOp<T> {
    input: Var,
    weight: Var,
    bias: Var,
    geom: Geometry,
    cout: usize,
    cols: Vec<T>,
}

impl<T: Scalar> Backward<T> for Conv2dOp<T> {
    fn backward(&self, ctx: &mut BackwardCtx<'_, T>, _out: Var, grad: &[T]) {
        let g = &self.geom;
        let (p, q, kk) = (g.positions(), g.columns(), g.patch());
        // Gather the output gradient into the (Cout, N*P) lowered layout.
        let mut gmat = vec![T::zero(); self.cout * q];
        for n in 0..g.n {
            for o in 0..self.cout {
                let src = &grad[(n * self.cout + o) * p..(n * self.cout + o + 1) * p];
                gmat[o * q + n * p..o * q + (n + 1) * p].copy_from_slice(src);
            }
        }
        if ctx.wants(self.bias) {
            let gb = ctx.grad(self.bias);
            for (o, b) in gb.iter_mut().enumerate() {
                *b += gmat[o * q..(o + 1) * q].iter().copied().sum();
            }
        }
        if ctx.wants(self.weight) {
            let gw = ctx.grad(self.weight);
            T::gemm(self.cout, q, kk, T::one(), &gmat, q as isize, 1, &self.cols, 1, q as isize, T::one(), gw, kk as isize, 1);
        }
        if ctx.wants(self.input) {
            let (w, gi) = ctx.value_and_grad(self.weight, self.input);
            let mut dcols = vec![T::zero(); kk * q];
            T::gemm(kk, self.cout, q, T::one(), w.data(), 1, kk as isize, &gmat, q as isize, 1, T::zero(), &mut dcols, q as isize, 1);
            col2im(&dcols, g, gi);
        }
    }
}

struct MaxPoolOp {
    input: Var,
    argmax: Vec<usize>,
}

impl<T: Scalar> Backward<T> for MaxPoolOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_, T>, _out: Var, grad: &[T]) {
        if !ctx.wants(self.input) {
            return;
        }
        let gi = ctx.grad(self.input);
        for (&src, &d) in self.argmax.iter().zip(grad) {
            gi[src] += d;
        }
    }
}

struct GlobalAvgPoolOp {
    input: Var,
}

impl<T: Scalar> Backward<T> for GlobalAvgPoolOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_, T>, _out: Var, grad: &[T]) {
        if !ctx.wants(self.input) {
            return;
        }
        let shape = ctx.value(self.input).shape().to_vec();
        let hw = shape[2] * shape[3];
        let inv = T::one() / T::lit(hw as f64);
        let gi = ctx.grad(self.input);
        for (plane, &d) in gi.chunks_mut(hw).zip(grad) {
            plane.iter_mut().for_each(|g| *g += d * inv);
        }
    }
}

fn expect_nchw(op: &'static str, shape: &[usize]) -> Result<()> {
    if shape.len() != 4 {
        return Err(Error::shape(op, format!("expected NCHW input, got shape {shape:?}")));
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    /// 2-d cross-correlation with square kernel `weight: (Cout, Cin, K, K)`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        expect_nchw("conv2d", x.shape())?;
        if w.rank() != 4 || w.dim(2) != w.dim(3) {
            return Err(Error::shape("conv2d", format!("weight must be (Cout, Cin, K, K), got {:?}", w.shape())));
        }
        let (n, cin, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (cout, k) = (w.dim(0), w.dim(2));
        if w.dim(1) != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input channels (dim 1) = {cin} but weight expects {}", w.dim(1)),
            ));
        }
        if b.shape() != [cout] {
            return Err(Error::shape("conv2d", format!("bias shape {:?} != [{cout}]", b.shape())));
        }
        let ho = conv_out_extent(h, k, stride, padding).ok_or_else(|| {
            Error::shape("conv2d", format!("height (dim 2) = {h} too small for kernel {k} with padding {padding}, stride {stride}"))
        })?;
        let wo = conv_out_extent(wd, k, stride, padding).ok_or_else(|| {
            Error::shape("conv2d", format!("width (dim 3) = {wd} too small for kernel {k} with padding {padding}, stride {stride}"))
        })?;
        let geom = Geometry { n, cin, h, w: wd, k, stride, pad: padding, ho, wo };
        let (p, q, kk) = (geom.positions(), geom.columns(), geom.patch());
        let cols = im2col(x.data(), &geom);
        let mut tmp = vec![T::zero(); cout * q];
        T::gemm(cout, kk, q, T::one(), w.data(), kk as isize, 1, &cols, q as isize, 1, T::zero(), &mut tmp, q as isize, 1);
        let mut out = vec![T::zero(); n * cout * p];
        for s in 0..n {
            for o in 0..cout {
                let bias_o = b.data()[o];
                let dst = &mut out[(s * cout + o) * p..(s * cout + o + 1) * p];
                for (d, &t) in dst.iter_mut().zip(&tmp[o * q + s * p..o * q + (s + 1) * p]) {
                    *d = t + bias_o;
                }
            }
        }
        let value = Tensor::new([n, cout, ho, wo], out)?;
        let needs_cols = self.requires_grad(weight);
        let op = Conv2dOp { input, weight, bias, geom, cout, cols: if needs_cols { cols } else { Vec::new() } };
        Ok(self.push(value, &[input, weight, bias], op))
    }

    /// Max pooling with square window; ties resolve to the first maximum.
    pub fn max_pool2d(&mut self, input: Var, kernel: usize, stride: usize) -> Result<Var> {
        let x = self.value(input);
        expect_nchw("max_pool2d", x.shape())?;
        let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let ho = conv_out_extent(h, kernel, stride, 0)
            .ok_or_else(|| Error::shape("max_pool2d", format!("height (dim 2) = {h} smaller than window {kernel}")))?;
        let wo = conv_out_extent(w, kernel, stride, 0)
            .ok_or_else(|| Error::shape("max_pool2d", format!("width (dim 3) = {w} smaller than window {kernel}")))?;
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * stride * w + ox * stride;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                            if x.data()[idx] > x.data()[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x.data()[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new([n, c, ho, wo], out)?;
        Ok(self.push(value, &[input], MaxPoolOp { input, argmax }))
    }

    /// `(N, C, H, W) -> (N, C)` spatial mean.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        expect_nchw("global_avg_pool", x.shape())?;
        let (n, c, hw) = (x.dim(0), x.dim(1), x.dim(2) * x.dim(3));
        let inv = T::one() / T::lit(hw as f64);
        let data = x.data().chunks(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let value = Tensor::new([n, c], data)?;
        Ok(self.push(value, &[input], GlobalAvgPoolOp { input }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut tape = Tape::<f32>::new();
        let x = Tensor::from_fn([2, 3, 4, 5], |i| (i as f32).sin());
        let xv = tape.constant(x.clone());
        let w = tape.constant(Tensor::from_fn([3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 }));
        let b = tape.constant(Tensor::zeros([3]));
        let y = tape.conv2d(xv, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn zero_input_yields_broadcast_bias() {
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(Tensor::zeros([1, 2, 6, 6]));
        let w = tape.constant(Tensor::from_fn([4, 2, 3, 3], |i| i as f64 * 0.1));
        let b = tape.constant(Tensor::new([4], vec![0.5, -1.0, 2.0, 0.0]).unwrap());
        let y = tape.conv2d(xv, w, b, 2, 1).unwrap();
        let v = tape.value(y);
        assert_eq!(v.shape(), &[1, 4, 3, 3]);
        for (o, plane) in v.data().chunks(9).enumerate() {
            assert!(plane.iter().all(|&p| p == [0.5, -1.0, 2.0, 0.0][o]));
        }
    }

    #[test]
    fn output_extent_follows_floor_rule() {
        assert_eq!(conv_out_extent(64, 3, 2, 1), Some(32));
        assert_eq!(conv_out_extent(7, 3, 2, 1), Some(4));
        assert_eq!(conv_out_extent(5, 1, 2, 0), Some(3));
        assert_eq!(conv_out_extent(1, 3, 1, 0), None);
    }

    #[test]
    fn channel_mismatch_names_dimension() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros([1, 2, 4, 4]));
        let w = tape.constant(Tensor::zeros([4, 3, 3, 3]));
        let b = tape.constant(Tensor::zeros([4]));
        let err = tape.conv2d(x, w, b, 1, 1).unwrap_err().to_string();
        assert!(err.contains("dim 1"), "{err}");
    }

    #[test]
    fn max_pool_picks_window_maximum() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new([1, 1, 2, 2], vec![1.0, 4.0, 3.0, 2.0]).unwrap(), true);
        let y = tape.max_pool2d(x, 2, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
        let s = tape.sum_all(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }
}
