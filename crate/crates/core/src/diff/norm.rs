//! Per-channel batch normalization with running statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::tape::{Backward, BackwardCtx, Tape, Var};
use super::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Non-learnable half of a batch-norm layer. The scale and shift are ordinary
/// parameters passed to [`Tape::batchnorm2d`] as tracked leaves.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub eps: T,
}

impl<T: Scalar> BatchNormState<T> {
    /// Zero mean, unit variance, momentum 0.1, eps 1e-5.
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::lit(0.1),
            eps: T::lit(1e-5),
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

struct BatchNormOp<T> {
    input: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    mode: Mode,
}

impl<T: Scalar> Backward<T> for BatchNormOp<T> {
    fn backward(&self, ctx: &mut BackwardCtx<'_, T>, _out: Var, grad: &[T]) {
        let shape = ctx.value(self.input).shape().to_vec();
        let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let count = T::lit((n * hw) as f64);
        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xhat = vec![T::zero(); c];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                for i in base..base + hw {
                    sum_dy[ch] += grad[i];
                    sum_dy_xhat[ch] += grad[i] * self.xhat[i];
                }
            }
        }
        if ctx.wants(self.input) {
            let (gamma, gi) = ctx.value_and_grad(self.gamma, self.input);
            let gamma = gamma.data();
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * hw;
                    let k = gamma[ch] * self.inv_std[ch];
                    match self.mode {
                        Mode::Eval => {
                            for i in base..base + hw {
                                gi[i] += k * grad[i];
                            }
                        }
                        Mode::Train => {
                            let (a, b) = (sum_dy[ch] / count, sum_dy_xhat[ch] / count);
                            for i in base..base + hw {
                                gi[i] += k * (grad[i] - a - self.xhat[i] * b);
                            }
                        }
                    }
                }
            }
        }
        if ctx.wants(self.gamma) {
            for (g, d) in ctx.grad(self.gamma).iter_mut().zip(&sum_dy_xhat) {
                *g += *d;
            }
        }
        if ctx.wants(self.beta) {
            for (g, d) in ctx.grad(self.beta).iter_mut().zip(&sum_dy) {
                *g += *d;
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// Batch normalization over `(N, H, W)` per channel.
    ///
    /// Train mode normalizes with batch statistics and folds them into the
    /// running estimates (unbiased variance); eval mode uses the running estimates.
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState<T>,
        mode: Mode,
    ) -> Result<Var> {
        let x = self.value(input);
        if x.rank() != 4 {
            return Err(Error::shape("batchnorm2d", format!("expected NCHW input, got {:?}", x.shape())));
        }
        let (n, c, hw) = (x.dim(0), x.dim(1), x.dim(2) * x.dim(3));
        if c != state.channels() || self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::shape(
                "batchnorm2d",
                format!(
                    "input has {c} channels (dim 1) but state has {}, scale {:?}, shift {:?}",
                    state.channels(),
                    self.value(gamma).shape(),
                    self.value(beta).shape()
                ),
            ));
        }
        let count = n * hw;
        let (mean, var) = match mode {
            Mode::Train => {
                if count < 2 {
                    return Err(Error::arg(
                        "batchnorm2d",
                        "train mode needs more than one value per channel (batch 1 with 1x1 extent)",
                    ));
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * hw;
                        mean[ch] += x.data()[base..base + hw].iter().copied().sum::<T>();
                    }
                }
                let inv = T::one() / T::lit(count as f64);
                mean.iter_mut().for_each(|m| *m *= inv);
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * hw;
                        var[ch] += x.data()[base..base + hw]
                            .iter()
                            .map(|&v| (v - mean[ch]) * (v - mean[ch]))
                            .sum::<T>();
                    }
                }
                var.iter_mut().for_each(|v| *v *= inv);
                let m = state.momentum;
                let unbias = T::lit(count as f64 / (count - 1) as f64);
                for ch in 0..c {
                    state.running_mean[ch] = (T::one() - m) * state.running_mean[ch] + m * mean[ch];
                    state.running_var[ch] = (T::one() - m) * state.running_var[ch] + m * var[ch] * unbias;
                }
                (mean, var)
            }
            Mode::Eval => (state.running_mean.clone(), state.running_var.clone()),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + state.eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                for i in base..base + hw {
                    let h = (x.data()[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + b[ch];
                }
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(value, &[input, gamma, beta], BatchNormOp { input, gamma, beta, xhat, inv_std, mode }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(x: Tensor<f64>, gamma: f64, beta: f64, state: &mut BatchNormState<f64>, mode: Mode) -> Tensor<f64> {
        let c = x.dim(1);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let g = tape.constant(Tensor::full([c], gamma));
        let b = tape.constant(Tensor::full([c], beta));
        let y = tape.batchnorm2d(xv, g, b, state, mode).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn standardized_input_passes_through() {
        // Per channel: values {-1, 1} repeated, i.e. mean 0 and biased variance 1.
        let x = Tensor::from_fn([2, 3, 2, 2], |i| if i % 2 == 0 { -1.0 } else { 1.0 });
        let y = run(x.clone(), 1.0, 0.0, &mut BatchNormState::new(3), Mode::Train);
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn constant_channel_maps_to_shift() {
        let x = Tensor::full([4, 2, 3, 3], 7.5);
        let y = run(x, 2.0, 0.25, &mut BatchNormState::new(2), Mode::Train);
        assert!(y.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn train_output_has_requested_moments() {
        let x = Tensor::from_fn([3, 2, 4, 4], |i| ((i * 37 % 11) as f64).sqrt());
        let y = run(x, 1.5, -0.5, &mut BatchNormState::new(2), Mode::Train);
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3).flat_map(|s| y.data()[(s * 2 + ch) * 16..(s * 2 + ch + 1) * 16].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!((mean + 0.5).abs() < 1e-9);
            assert!((var - 2.25).abs() < 1e-3);
        }
    }

    #[test]
    fn train_updates_running_stats_with_momentum() {
        let x = Tensor::from_fn([1, 1, 2, 2], |i| i as f64); // mean 1.5, unbiased var 5/3
        let mut state = BatchNormState::new(1);
        run(x, 1.0, 0.0, &mut state, Mode::Train);
        assert!((state.running_mean[0] - 0.15).abs() < 1e-12);
        assert!((state.running_var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn eval_is_deterministic_affine_map() {
        let mut state = BatchNormState::new(2);
        state.running_mean = vec![1.0, -2.0];
        state.running_var = vec![4.0, 0.25];
        let x = Tensor::from_fn([1, 2, 1, 2], |i| i as f64);
        let a = run(x.clone(), 1.0, 0.0, &mut state.clone(), Mode::Eval);
        let b = run(x, 1.0, 0.0, &mut state, Mode::Eval);
        assert_eq!(a, b);
        let eps = 1e-5f64;
        assert!((a.data()[0] - (0.0 - 1.0) / (4.0 + eps).sqrt()).abs() < 1e-12);
        assert!((a.data()[3] - (3.0 + 2.0) / (0.25 + eps).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rejects_single_value_batches_in_train_mode() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros([1, 2, 1, 1]));
        let g = tape.constant(Tensor::ones([2]));
        let b = tape.constant(Tensor::zeros([2]));
        assert!(tape.batchnorm2d(x, g, b, &mut BatchNormState::new(2), Mode::Train).is_err());
        assert!(tape.batchnorm2d(x, g, b, &mut BatchNormState::new(2), Mode::Eval).is_ok());
    }
}
