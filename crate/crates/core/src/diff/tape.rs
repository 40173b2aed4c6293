use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one recorded operation.
///
/// `grad` is the gradient flowing into the operation's output; implementors
/// accumulate into their inputs through the context.
pub trait Backward<T: Scalar> {
    fn backward(&self, ctx: &mut BackwardCtx<'_, T>, out: Var, grad: &[T]);
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    requires_grad: bool,
    leaf: bool,
    backward: Option<Box<dyn Backward<T>>>,
}

/// Linear record of executed operations. Nodes are appended in execution
/// order, so the node list is already topologically sorted.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Tracked leaves receive gradients from [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor<T>, tracked: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node { value, requires_grad: tracked, leaf: true, backward: None });
        Var(id)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Detached copy of a value as a new untracked leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// Appends an operation output. The backward closure is kept only when some
    /// input requires a gradient.
    pub(crate) fn push<B: Backward<T> + 'static>(
        &mut self,
        value: Tensor<T>,
        inputs: &[Var],
        backward: B,
    ) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            requires_grad,
            leaf: false,
            backward: if requires_grad { Some(Box::new(backward)) } else { None },
        });
        Var(id)
    }

    /// Reverse sweep from a scalar loss. Consumes the tape and returns the
    /// gradients of every tracked leaf.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::arg("backward", "tape is empty"));
        }
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", loss_value.shape()),
            ));
        }
        if !loss_value.item().is_finite() {
            return Err(Error::NonFinite { context: "backward".into() });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(backward) = self.nodes[i].backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let mut ctx = BackwardCtx { nodes: &self.nodes, grads: &mut grads };
            backward.backward(&mut ctx, Var(i), &grad);
        }
        let leaves = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                if node.leaf && node.requires_grad {
                    Some(match g {
                        Some(g) => Tensor::new(node.value.shape().to_vec(), g)
                            .expect("gradient matches value shape"),
                        None => Tensor::zeros(node.value.shape().to_vec()),
                    })
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients { grads: leaves })
    }
}

/// Access to forward values and gradient accumulators during the reverse sweep.
pub struct BackwardCtx<'a, T: Scalar> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Vec<T>>],
}

impl<T: Scalar> BackwardCtx<'_, T> {
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulator of `v`, zero-initialized on first use.
    pub fn grad(&mut self, v: Var) -> &mut [T] {
        let n = self.nodes[v.0].value.len();
        self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
    }

    /// Forward value of `a` together with the accumulator of `b`.
    pub fn value_and_grad(&mut self, a: Var, b: Var) -> (&Tensor<T>, &mut [T]) {
        let n = self.nodes[b.0].value.len();
        let g = self.grads[b.0].get_or_insert_with(|| vec![T::zero(); n]);
        (&self.nodes[a.0].value, g)
    }

    pub fn accumulate(&mut self, v: Var, delta: &[T]) {
        if !self.wants(v) {
            return;
        }
        for (g, &d) in self.grad(v).iter_mut().zip(delta) {
            *g += d;
        }
    }
}

/// Leaf gradients produced by a backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
