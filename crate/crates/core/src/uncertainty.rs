//! Variance head, log-variance losses and confidence heatmaps.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Dense, Group, ParamStore};
use crate::posehead::NUM_JOINTS;
use crate::scalar::Scalar;

pub const ALPHA_MIN: f64 = -10.0;
pub const ALPHA_MAX: f64 = 10.0;
pub const ALPHA_2D: usize = NUM_JOINTS * 2;
pub const ALPHA_3D: usize = NUM_JOINTS * 3;

/// Form of the 2D variance loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Var2dForm {
    /// `exp(-a) * l + a / 2`, minimized at `a = log(2 l)`.
    #[default]
    Laplace,
    /// `exp(-a) * (l - 1/2) + a / 2`, minimized at `a = log(2 l - 1)` when `l > 1/2`.
    Shifted,
}

/// Tape handles of the variance head output.
#[derive(Clone, Copy, Debug)]
pub struct VarianceVars {
    /// First-layer feature after ReLU, `(N, fc_width / 2)`.
    pub f: Var,
    pub alpha_2d: Var,
    pub alpha_3d: Var,
}

#[derive(Clone, Debug)]
pub struct VarianceHead {
    pub fc1: Dense,
    pub fc2: Dense,
}

impl VarianceHead {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, latent: usize, fc_width: usize) -> Self {
        let hidden = (fc_width / 2).max(1);
        let fc1 = Dense::new(store, rng, "var.fc1", Group::VarianceHead, latent, hidden);
        let fc2 = Dense::new(store, rng, "var.fc2", Group::VarianceHead, hidden, ALPHA_2D + ALPHA_3D);
        for w in store.get_mut(fc2.weight).data_mut() {
            *w *= T::lit(0.1);
        }
        VarianceHead { fc1, fc2 }
    }

    pub fn feature_width(&self) -> usize {
        self.fc1.fan_out
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, latent: Var) -> Result<VarianceVars> {
        let h = self.fc1.forward(tape, p, latent)?;
        let f = tape.relu(h);
        let a = self.fc2.forward(tape, p, f)?;
        let a = tape.clamp(a, T::lit(ALPHA_MIN), T::lit(ALPHA_MAX));
        let alpha_2d = tape.narrow(a, 0, ALPHA_2D)?;
        let alpha_3d = tape.narrow(a, ALPHA_2D, ALPHA_3D)?;
        Ok(VarianceVars { f, alpha_2d, alpha_3d })
    }
}

/// Mean of `exp(-a) / 2 * e + a / 2` over coordinates.
pub fn var_loss_3d<T: Scalar>(e: &[T], alpha: &[T]) -> T {
    let s: T = e.iter().zip(alpha).map(|(&e, &a)| (-a).exp() * T::half() * e + T::half() * a).sum();
    s / T::lit(e.len() as f64)
}

/// Mean of the chosen 2D variance loss over coordinates.
pub fn var_loss_2d<T: Scalar>(l: &[T], alpha: &[T], form: Var2dForm) -> T {
    let shift = match form {
        Var2dForm::Laplace => T::zero(),
        Var2dForm::Shifted => T::half(),
    };
    let s: T = l.iter().zip(alpha).map(|(&l, &a)| (-a).exp() * (l - shift) + T::half() * a).sum();
    s / T::lit(l.len() as f64)
}

/// Average variance `mean(exp(a))`.
pub fn mean_variance<T: Scalar>(alpha: &[T]) -> T {
    alpha.iter().map(|a| a.exp()).sum::<T>() / T::lit(alpha.len() as f64)
}

/// Per-joint variance: mean of the two coordinate variances.
pub fn joint_variances<T: Scalar>(alpha_2d: &[T]) -> Vec<T> {
    alpha_2d.chunks_exact(2).map(|c| (c[0].exp() + c[1].exp()) * T::half()).collect()
}

impl<T: Scalar> Tape<T> {
    /// Batch mean of [`var_loss_3d`]; `sq_err` and `alpha` share a shape.
    pub fn var_loss_3d(&mut self, sq_err: Var, alpha: Var) -> Result<Var> {
        let na = self.scale(alpha, -T::one());
        let w = self.exp(na);
        let we = self.hadamard(w, sq_err)?;
        let sum = self.add(we, alpha)?;
        let m = self.mean_all(sum);
        Ok(self.scale(m, T::half()))
    }

    /// Batch mean of [`var_loss_2d`]; `l` holds per-coordinate smooth-L1 values.
    pub fn var_loss_2d(&mut self, l: Var, alpha: Var, form: Var2dForm) -> Result<Var> {
        let l = match form {
            Var2dForm::Laplace => l,
            Var2dForm::Shifted => self.shift(l, -T::half()),
        };
        let na = self.scale(alpha, -T::one());
        let w = self.exp(na);
        let wl = self.hadamard(w, l)?;
        let half_a = self.scale(alpha, T::half());
        let sum = self.add(wl, half_a)?;
        Ok(self.mean_all(sum))
    }
}

/// One peak-normalized isotropic Gaussian per joint, `size x size` row-major.
pub fn confidence_heatmap(centers: &[[f64; 2]], variances: &[f64], size: usize) -> Result<Vec<Vec<f64>>> {
    if centers.len() != variances.len() {
        return Err(Error::shape(
            "confidence_heatmap",
            format!("{} centers vs {} variances", centers.len(), variances.len()),
        ));
    }
    if let Some(v) = variances.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
        return Err(Error::arg("confidence_heatmap", format!("variance must be positive, got {v}")));
    }
    Ok(centers
        .iter()
        .zip(variances)
        .map(|(c, &var)| {
            let mut img: Vec<f64> = (0..size * size)
                .map(|i| {
                    let (x, y) = ((i % size) as f64, (i / size) as f64);
                    let d2 = (x - c[0]).powi(2) + (y - c[1]).powi(2);
                    (-d2 / (2.0 * var)).exp()
                })
                .collect();
            let peak = img.iter().copied().fold(0.0, f64::max);
            if peak > 0.0 {
                img.iter_mut().for_each(|v| *v /= peak);
            }
            img
        })
        .collect())
}

/// Binary 8-bit PGM with optional header comments; values are clipped to `[0, 1]`.
pub fn pgm_bytes(pixels: &[f64], width: usize, height: usize, comments: &[String]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::shape("write_pgm", format!("{} pixels for {width}x{height}", pixels.len())));
    }
    if comments.iter().any(|c| c.contains('\n')) {
        return Err(Error::arg("write_pgm", "comments must be single lines"));
    }
    let mut buf = b"P5\n".to_vec();
    for c in comments {
        buf.extend_from_slice(format!("# {c}\n").as_bytes());
    }
    buf.extend_from_slice(format!("{width} {height}\n255\n").as_bytes());
    buf.extend(pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(buf)
}

pub fn write_pgm(path: &Path, pixels: &[f64], width: usize, height: usize) -> Result<()> {
    let buf = pgm_bytes(pixels, width, height, &[])?;
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}
