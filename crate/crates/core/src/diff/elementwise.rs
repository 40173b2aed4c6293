//! Pointwise and reduction primitives.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::tape::{Backward, BackwardCtx, Tape, Var};
use super::Tensor;

#[derive(Clone, Copy, Debug)]
enum Unary<T> {
    Relu,
    Sigmoid,
    Exp,
    Square,
    SmoothL1,
    Scale(T),
    Shift,
    Clamp(T, T),
}

struct UnaryOp<T> {
    input: Var,
    kind: Unary<T>,
}

impl<T: Scalar> Unary<T> {
    fn forward(self, x: T) -> T {
        match self {
            Unary::Relu => x.max(T::zero()),
            Unary::Sigmoid => sigmoid(x),
            Unary::Exp => x.exp(),
            Unary::Square => x * x,
            Unary::SmoothL1 => smooth_l1(x),
            Unary::Scale(c) => x * c,
            Unary::Shift => unreachable!("shift carries its offset separately"),
            Unary::Clamp(lo, hi) => x.max(lo).min(hi),
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative(self, x: T, y: T) -> T {
        match self {
            Unary::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Unary::Sigmoid => y * (T::one() - y),
            Unary::Exp => y,
            Unary::Square => x + x,
            Unary::SmoothL1 => {
                if x.abs() < T::one() {
                    x
                } else {
                    x.signum()
                }
            }
            Unary::Scale(c) => c,
            Unary::Shift => T::one(),
            Unary::Clamp(lo, hi) => {
                if x >= lo && x <= hi {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Huber loss with unit transition point.
pub fn smooth_l1<T: Scalar>(x: T) -> T {
    let a = x.abs();
    if a < T::one() {
        T::half() * x * x
    } else {
        a - T::half()
    }
}

impl<T: Scalar> Backward<T> for UnaryOp<T> {
    fn backward(&self, ctx: &mut BackwardCtx<'_, T>, out: Var, grad: &[T]) {
        let x = ctx.value(self.input).data();
        let y = ctx.value(out).data();
        let delta: Vec<T> = x
            .iter()
            .zip(y)
            .zip(grad)
            .map(|((&x, &y), &g)| g * self.kind.derivative(x, y))
            .collect();
        ctx.accumulate(self.input, &delta);
    }
}

#[derive(Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

struct BinaryOp {
    a: Var,
    b: Var,
    kind: BinaryKind,
}

impl<T: Scalar> Backward<T> for BinaryOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_, T>, _out: Var, grad: &[T]) {
        match self.kind {
            BinaryKind::Add => {
                ctx.accumulate(self.a, grad);
                ctx.accumulate(self.b, grad);
            }
            BinaryKind::Sub => {
                ctx.accumulate(self.a, grad);
                if ctx.wants(self.b) {
                    for (g, &d) in ctx.grad(self.b).iter_mut().zip(grad) {
                        *g -= d;
                    }
                }
            }
            BinaryKind::Mul => {
                if ctx.wants(self.a) {
                    let (bv, ga) = ctx.value_and_grad(self.b, self.a);
                    for ((g, &d), &b) in ga.iter_mut().zip(grad).zip(bv.data()) {
                        *g += d * b;
                    }
                }
                if ctx.wants(self.b) {
                    let (av, gb) = ctx.value_and_grad(self.a, self.b);
                    for ((g, &d), &a) in gb.iter_mut().zip(grad).zip(av.data()) {
                        *g += d * a;
                    }
                }
            }
        }
    }
}

struct Passthrough {
    input: Var,
}

impl<T: Scalar> Backward<T> for Passthrough {
    fn backward(&self, ctx: &mut BackwardCtx<'_, T>, _out: Var, grad: &[T]) {
        ctx.accumulate(self.input, grad);
    }
}

#[derive(Clone, Copy)]
enum Reduce {
    SumAll,
    MeanAll,
    SumRows,
    MeanRows,
}

struct ReduceOp {
    input: Var,
    kind: Reduce,
}

impl<T: Scalar> Backward<T> for ReduceOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_, T>, _out: Var, grad: &[T]) {
        if !ctx.wants(self.input) {
            return;
        }
        let shape = ctx.value(self.input).shape().to_vec();
        let n = shape.iter().product::<usize>();
        let rows = shape[0];
        let width = n / rows;
        let gi = ctx.grad(self.input);
        match self.kind {
            Reduce::SumAll => gi.iter_mut().for_each(|g| *g += grad[0]),
            Reduce::MeanAll => {
                let s = grad[0] / T::lit(n as f64);
                gi.iter_mut().for_each(|g| *g += s);
            }
            Reduce::SumRows | Reduce::MeanRows => {
                let div = match self.kind {
                    Reduce::MeanRows => T::lit(width as f64),
                    _ => T::one(),
                };
                for (r, chunk) in gi.chunks_mut(width).enumerate() {
                    let s = grad[r] / div;
                    chunk.iter_mut().for_each(|g| *g += s);
                }
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    fn unary(&mut self, x: Var, kind: Unary<T>) -> Var {
        let value = self.value(x).map(|v| kind.forward(v));
        self.push(value, &[x], UnaryOp { input: x, kind })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    /// Elementwise Huber loss (transition at |x| = 1).
    pub fn smooth_l1(&mut self, x: Var) -> Var {
        self.unary(x, Unary::SmoothL1)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, Unary::Scale(c))
    }

    pub fn shift(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v + c);
        self.push(value, &[x], UnaryOp { input: x, kind: Unary::Shift })
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(x, Unary::Clamp(lo, hi))
    }

    fn binary(&mut self, a: Var, b: Var, kind: BinaryKind, op: &'static str) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(
                op,
                format!("operand shapes differ: {:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
            })
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, &[a, b], BinaryOp { a, b, kind }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub, "sub")
    }

    /// Elementwise (Hadamard) product.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul, "hadamard")
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, &[x], Passthrough { input: x }))
    }

    fn reduce(&mut self, x: Var, kind: Reduce) -> Var {
        let v = self.value(x);
        let rows = v.dim(0);
        let width = v.len() / rows;
        let value = match kind {
            Reduce::SumAll => Tensor::scalar(v.data().iter().copied().sum()),
            Reduce::MeanAll => {
                Tensor::scalar(v.data().iter().copied().sum::<T>() / T::lit(v.len() as f64))
            }
            Reduce::SumRows | Reduce::MeanRows => {
                let div = match kind {
                    Reduce::MeanRows => T::lit(width as f64),
                    _ => T::one(),
                };
                Tensor::from_fn([rows], |r| v.row(r).iter().copied().sum::<T>() / div)
            }
        };
        self.push(value, &[x], ReduceOp { input: x, kind })
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        self.reduce(x, Reduce::SumAll)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        self.reduce(x, Reduce::MeanAll)
    }

    /// `(N, ...) -> (N)` sum over all trailing axes.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        self.reduce(x, Reduce::SumRows)
    }

    /// `(N, ...) -> (N)` mean over all trailing axes.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        self.reduce(x, Reduce::MeanRows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient_is_analytic() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.square(x);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn hadamard_sum_gradients_swap_operands() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap(), true);
        let b = tape.leaf(Tensor::new([3], vec![4.0, 5.0, -6.0]).unwrap(), true);
        let p = tape.hadamard(a, b).unwrap();
        let s = tape.sum_all(p);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[4.0, 5.0, -6.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn hadamard_with_ones_is_identity() {
        let mut tape = Tape::<f32>::new();
        let f = Tensor::from_fn([2, 3, 2, 2], |i| i as f32 * 0.25 - 1.0);
        let fv = tape.constant(f.clone());
        let m = tape.constant(Tensor::ones([2, 3, 2, 2]));
        let out = tape.hadamard(fv, m).unwrap();
        assert_eq!(tape.value(out), &f);
    }

    #[test]
    fn shape_mismatch_names_operands() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([3, 2]));
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros([2]), true);
        let b = tape.relu(a);
        assert!(tape.backward(b).is_err());
    }

    #[test]
    fn untracked_inputs_record_no_backward() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::ones([2]));
        let b = tape.exp(a);
        assert!(!tape.requires_grad(b));
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        assert_eq!(sigmoid(1000.0f64), 1.0);
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert!((sigmoid(0.0f32) - 0.5).abs() < 1e-7);
    }
}
