//! Parameter-free spatial rearrangements: pixel shuffle, its inverse,
//! nearest-neighbour upsampling and channel folding.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::tape::{Backward, BackwardCtx, Tape, Var};
use super::Tensor;

/// `out[i] = in[source[i]]`; backward scatters.
struct GatherOp {
    input: Var,
    source: Vec<usize>,
}

impl<T: Scalar> Backward<T> for GatherOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_, T>, _out: Var, grad: &[T]) {
        if !ctx.wants(self.input) {
            return;
        }
        let gi = ctx.grad(self.input);
        for (&s, &d) in self.source.iter().zip(grad) {
            gi[s] += d;
        }
    }
}

/// Mean over groups of `group` consecutive channels.
struct ChannelMeanOp {
    input: Var,
    group: usize,
}

impl<T: Scalar> Backward<T> for ChannelMeanOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_, T>, out: Var, grad: &[T]) {
        if !ctx.wants(self.input) {
            return;
        }
        let shape = ctx.value(out).shape().to_vec();
        let (n, cout, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let cin = cout * self.group;
        let inv = T::one() / T::lit(self.group as f64);
        let gi = ctx.grad(self.input);
        for s in 0..n {
            for c in 0..cout {
                let src = &grad[(s * cout + c) * hw..(s * cout + c + 1) * hw];
                for k in 0..self.group {
                    let base = (s * cin + c * self.group + k) * hw;
                    for (g, &d) in gi[base..base + hw].iter_mut().zip(src) {
                        *g += d * inv;
                    }
                }
            }
        }
    }
}

fn nchw(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::shape(op, format!("expected NCHW input, got {shape:?}"))),
    }
}

/// Source index map of a pixel shuffle with factor `r`.
fn pixel_shuffle_map(n: usize, c: usize, h: usize, w: usize, r: usize) -> Vec<usize> {
    let (oh, ow, cin) = (h * r, w * r, c * r * r);
    let mut map = Vec::with_capacity(n * c * oh * ow);
    for s in 0..n {
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let (hh, i, ww, j) = (y / r, y % r, x / r, x % r);
                    let src_c = ch * r * r + i * r + j;
                    map.push(((s * cin + src_c) * h + hh) * w + ww);
                }
            }
        }
    }
    map
}

impl<T: Scalar> Tape<T> {
    fn gather(&mut self, input: Var, shape: [usize; 4], source: Vec<usize>) -> Result<Var> {
        let x = self.value(input);
        let data = source.iter().map(|&s| x.data()[s]).collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, &[input], GatherOp { input, source }))
    }

    /// `(N, C r^2, H, W) -> (N, C, rH, rW)` with
    /// `out[n, c, h r + i, w r + j] = in[n, c r^2 + i r + j, h, w]`.
    pub fn pixel_shuffle(&mut self, input: Var, r: usize) -> Result<Var> {
        let (n, cin, h, w) = nchw("pixel_shuffle", self.shape(input))?;
        if r == 0 || cin % (r * r) != 0 {
            return Err(Error::shape(
                "pixel_shuffle",
                format!("channel count (dim 1) = {cin} not divisible by r^2 = {}", r * r),
            ));
        }
        let c = cin / (r * r);
        self.gather(input, [n, c, h * r, w * r], pixel_shuffle_map(n, c, h, w, r))
    }

    /// Inverse of [`Tape::pixel_shuffle`]: `(N, C, rH, rW) -> (N, C r^2, H, W)`.
    pub fn space_to_depth(&mut self, input: Var, r: usize) -> Result<Var> {
        let (n, c, oh, ow) = nchw("space_to_depth", self.shape(input))?;
        if r == 0 || oh % r != 0 || ow % r != 0 {
            return Err(Error::shape(
                "space_to_depth",
                format!("spatial extent {oh}x{ow} (dims 2, 3) not divisible by r = {r}"),
            ));
        }
        let (h, w) = (oh / r, ow / r);
        let forward = pixel_shuffle_map(n, c, h, w, r);
        let mut inverse = vec![0; forward.len()];
        for (dst, &src) in forward.iter().enumerate() {
            inverse[src] = dst;
        }
        self.gather(input, [n, c * r * r, h, w], inverse)
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Result<Var> {
        let (n, c, h, w) = nchw("upsample_nearest", self.shape(input))?;
        if factor == 0 {
            return Err(Error::arg("upsample_nearest", "factor must be positive"));
        }
        let (oh, ow) = (h * factor, w * factor);
        let mut map = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            for y in 0..oh {
                for x in 0..ow {
                    map.push((plane * h + y / factor) * w + x / factor);
                }
            }
        }
        self.gather(input, [n, c, oh, ow], map)
    }

    /// Changes the channel count without parameters: averages groups of
    /// channels when shrinking, tiles the channel list when growing.
    pub fn channel_resize(&mut self, input: Var, channels: usize) -> Result<Var> {
        let (n, cin, h, w) = nchw("channel_resize", self.shape(input))?;
        if channels == cin {
            return Ok(input);
        }
        let hw = h * w;
        if channels > 0 && channels < cin && cin % channels == 0 {
            let group = cin / channels;
            let x = self.value(input);
            let inv = T::one() / T::lit(group as f64);
            let mut out = vec![T::zero(); n * channels * hw];
            for s in 0..n {
                for c in 0..channels {
                    let dst = &mut out[(s * channels + c) * hw..(s * channels + c + 1) * hw];
                    for k in 0..group {
                        let base = (s * cin + c * group + k) * hw;
                        for (d, &v) in dst.iter_mut().zip(&x.data()[base..base + hw]) {
                            *d += v * inv;
                        }
                    }
                }
            }
            let value = Tensor::new([n, channels, h, w], out)?;
            return Ok(self.push(value, &[input], ChannelMeanOp { input, group }));
        }
        if channels > cin && channels % cin == 0 {
            let mut map = Vec::with_capacity(n * channels * hw);
            for s in 0..n {
                for c in 0..channels {
                    let base = (s * cin + c % cin) * hw;
                    map.extend(base..base + hw);
                }
            }
            return self.gather(input, [n, channels, h, w], map);
        }
        Err(Error::shape(
            "channel_resize",
            format!("cannot fold {cin} channels (dim 1) into {channels}"),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn shuffle_shape_law() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros([1, 4, 2, 2]));
        let y = tape.pixel_shuffle(x, 2).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 4, 4]);
    }

    #[test]
    fn shuffle_places_channels_in_raster_order() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new([1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = tape.pixel_shuffle(x, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
    }

    #[test]
    fn shuffle_rejects_indivisible_channels() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros([1, 6, 2, 2]));
        let err = tape.pixel_shuffle(x, 2).unwrap_err().to_string();
        assert!(err.contains("dim 1"), "{err}");
    }

    #[test]
    fn channel_resize_averages_and_tiles() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new([1, 4, 1, 1], vec![1.0, 3.0, 5.0, 7.0]).unwrap());
        let down = tape.channel_resize(x, 2).unwrap();
        assert_eq!(tape.value(down).data(), &[2.0, 6.0]);
        let up = tape.channel_resize(x, 8).unwrap();
        assert_eq!(tape.value(up).data(), &[1.0, 3.0, 5.0, 7.0, 1.0, 3.0, 5.0, 7.0]);
        assert!(tape.channel_resize(x, 3).is_err());
    }

    #[test]
    fn nearest_upsampling_repeats_pixels() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new([1, 1, 1, 2], vec![1.0, 2.0]).unwrap());
        let y = tape.upsample_nearest(x, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }

    proptest! {
        #[test]
        fn shuffle_then_inverse_is_identity(n in 1usize..3, c in 1usize..4, h in 1usize..4, w in 1usize..4, r in 1usize..4) {
            let mut tape = Tape::<f64>::new();
            let x = Tensor::from_fn([n, c * r * r, h, w], |i| i as f64);
            let xv = tape.constant(x.clone());
            let y = tape.pixel_shuffle(xv, r).unwrap();
            let z = tape.space_to_depth(y, r).unwrap();
            prop_assert_eq!(tape.value(z), &x);
            let back = tape.pixel_shuffle(z, r).unwrap();
            prop_assert_eq!(tape.value(back), tape.value(y));
        }
    }
}
