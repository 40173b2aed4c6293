//! Named parameter storage and the two weighted layer kinds.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Component a parameter belongs to; drives freezing and learning-rate rules.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    FeatureExtractor,
    Refiner,
    Attention,
    PoseHead,
    VarianceHead,
    Gate,
}

impl Group {
    pub const ALL: [Group; 6] = [
        Group::FeatureExtractor,
        Group::Refiner,
        Group::Attention,
        Group::PoseHead,
        Group::VarianceHead,
        Group::Gate,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub group: Group,
    pub value: Tensor<T>,
}

/// Ordered collection of every learnable tensor of a model.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Tensor<T>) -> ParamId {
        self.entries.push(ParamEntry { name: name.into(), group, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Scalar count of parameters in the selected groups.
    pub fn count(&self, groups: &[Group]) -> usize {
        self.entries.iter().filter(|e| groups.contains(&e.group)).map(|e| e.value.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry { name: e.name.clone(), group: e.group, value: e.value.cast() })
                .collect(),
        }
    }

    /// Records every parameter as a leaf; only groups accepted by `trainable`
    /// are tracked.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: impl Fn(Group) -> bool) -> Bound {
        let vars = self.entries.iter().map(|e| tape.leaf(e.value.clone(), trainable(e.group))).collect();
        Bound { vars }
    }

    /// Replaces a parameter value, checking its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.value.shape() != value.shape() {
            return Err(Error::shape(
                "param_set",
                format!("{} expects {:?}, got {:?}", entry.name, entry.value.shape(), value.shape()),
            ));
        }
        entry.value = value;
        Ok(())
    }
}

/// Tape variables for a [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients per parameter (None for untracked parameters).
    pub fn gradients<T: Scalar>(&self, grads: &mut Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.vars.iter().map(|&v| grads.take(v)).collect()
    }
}

/// He-uniform initialization: `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`, drawn in f64.
pub fn he_uniform<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| T::lit(rng.gen_range(-bound..bound)))
}

/// Fully connected layer `y = x W^T + b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Dense {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        group: Group,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), group, he_uniform(rng, &[fan_out, fan_in], fan_in));
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros([fan_out]));
        Dense { weight, bias, fan_in, fan_out }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p.var(self.weight), p.var(self.bias))
    }
}

/// Square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        group: Group,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            group,
            he_uniform(rng, &[out_channels, in_channels, kernel, kernel], fan_in),
        );
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros([out_channels]));
        Conv { weight, bias, in_channels, out_channels, kernel, stride, padding: kernel / 2 }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p.var(self.weight), p.var(self.bias), self.stride, self.padding)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn he_uniform_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t: Tensor<f64> = he_uniform(&mut rng, &[64, 16], 16);
        let bound = (6.0f64 / 16.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= bound));
        assert!(t.data().iter().any(|v| v.abs() > bound * 0.5));
    }

    #[test]
    fn untracked_groups_get_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let a = Dense::new(&mut store, &mut rng, "a", Group::FeatureExtractor, 3, 2);
        let b = Dense::new(&mut store, &mut rng, "b", Group::Refiner, 2, 1);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, |g| g != Group::FeatureExtractor);
        let x = tape.constant(Tensor::ones([1, 3]));
        let h = a.forward(&mut tape, &bound, x).unwrap();
        let y = b.forward(&mut tape, &bound, h).unwrap();
        let loss = tape.sum_all(y);
        let mut grads = tape.backward(loss).unwrap();
        let g = bound.gradients(&mut grads);
        assert!(g[a.weight.index()].is_none());
        assert!(g[b.weight.index()].is_some());
    }
}
