//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass. Each recorded
//! node keeps its output value, the ids of its inputs and, when any input
//! needs a gradient, a backward rule. [`Tape::backward`] walks the nodes in
//! reverse insertion order, which is a valid reverse topological order
//! because a node can only be recorded after its inputs exist.
//!
//! ```
//! use ravnet::autodiff::Tape;
//! use ravnet::tensor::Tensor;
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::scalar(2.0));
//! let loss = x.mul(x).unwrap().sum();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().item(), 4.0);
//! ```

use std::cell::{Ref, RefCell};
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{Dims, Real, Tensor};

mod gradcheck;
mod ops;

pub use gradcheck::{gradcheck, GradcheckReport, InputCheck, REL_ERR_FLOOR};
pub use ops::{concat_channels, SoftmaxAxis};

pub type NodeId = usize;

/// What a backward rule sees: the recorded input values, the output value,
/// the incoming gradient and which inputs actually want a gradient.
pub struct BackwardArgs<'a, T> {
    pub inputs: &'a [&'a Tensor<T>],
    pub output: &'a Tensor<T>,
    pub grad: &'a [T],
    pub needs: &'a [bool],
}

/// Returns one entry per input; `None` for inputs that need no gradient.
pub type BackwardFn<T> = Box<dyn Fn(&BackwardArgs<'_, T>) -> Vec<Option<Vec<T>>>>;

struct Node<T> {
    op: &'static str,
    value: Tensor<T>,
    parents: Vec<NodeId>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// A handle to a node on a tape.
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: NodeId,
}

impl<T> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T> Copy for Var<'_, T> {}

impl<T> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// A trainable input: gradients flow into it.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push("leaf", value, Vec::new(), true, None)
    }

    /// A non-differentiable input.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push("constant", value, Vec::new(), false, None)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Op names in recording order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.borrow().iter().map(|n| n.op).collect()
    }

    /// Records an operation whose output has already been computed.
    ///
    /// The backward rule is kept only when some parent requires a gradient.
    pub fn record<'t, F>(
        &'t self,
        op: &'static str,
        parents: &[Var<'t, T>],
        value: Tensor<T>,
        backward: F,
    ) -> Result<Var<'t, T>>
    where
        F: Fn(&BackwardArgs<'_, T>) -> Vec<Option<Vec<T>>> + 'static,
    {
        for p in parents {
            self.check_owned(*p)?;
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        let backward: Option<BackwardFn<T>> = if requires_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        Ok(self.push(
            op,
            value,
            parents.iter().map(|p| p.id).collect(),
            requires_grad,
            backward,
        ))
    }

    fn push(
        &self,
        op: &'static str,
        value: Tensor<T>,
        parents: Vec<NodeId>,
        requires_grad: bool,
        backward: Option<BackwardFn<T>>,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value,
            parents,
            requires_grad,
            backward,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn check_owned(&self, v: Var<'_, T>) -> Result<()> {
        if std::ptr::eq(v.tape, self) && v.id < self.len() {
            Ok(())
        } else {
            Err(Error::Tape(format!("{v:?} belongs to a different tape")))
        }
    }

    pub(crate) fn value_ref(&self, id: NodeId) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |nodes| &nodes[id].value)
    }

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Grads<T>> {
        self.check_owned(loss)?;
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if !root.value.dims().is_scalar() {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got dims {}",
                root.value.dims()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        if root.requires_grad {
            grads[loss.id] = Some(vec![T::one()]);
        }

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(rule) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let inputs: Vec<&Tensor<T>> = node.parents.iter().map(|&p| &nodes[p].value).collect();
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let contributions = rule(&BackwardArgs {
                inputs: &inputs,
                output: &node.value,
                grad: &g,
                needs: &needs,
            });
            debug_assert_eq!(contributions.len(), node.parents.len(), "op {}", node.op);
            for ((&parent, contribution), &need) in
                node.parents.iter().zip(contributions).zip(&needs)
            {
                let Some(c) = contribution else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(c.len(), nodes[parent].value.numel(), "op {}", node.op);
                match &mut grads[parent] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a = *a + *b),
                    slot @ None => *slot = Some(c),
                }
            }
            grads[id] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, node)| {
                g.map(|data| Tensor::from_vec(node.value.dims(), data).expect("grad dims"))
            })
            .collect();
        Ok(Grads { grads })
    }
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    /// `None` when the loss does not reach `v`.
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn get_id(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn dims(&self) -> Dims {
        self.tape.value_ref(self.id).dims()
    }

    /// Borrows the forward value. Do not hold the borrow across new ops.
    pub fn value_ref(&self) -> Ref<'t, Tensor<T>> {
        self.tape.value_ref(self.id)
    }

    pub fn value(&self) -> Tensor<T> {
        self.value_ref().clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_sum_is_ones() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec([1, 1, 2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let loss = x.sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn square_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let loss = x.mul(x).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 4.0);
    }

    #[test]
    fn reused_input_accumulates() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full([1, 1, 2, 3], 0.7));
        let y = x.add(x).unwrap();
        let g = tape.backward(y.sum()).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn unreachable_leaf_has_no_grad() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones([1, 1, 2, 2]));
        let unused = tape.leaf(Tensor::ones([1, 1, 2, 2]));
        let c = tape.constant(Tensor::ones([1, 1, 2, 2]));
        let loss = x.mul(c).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(x).is_some());
        assert!(g.get(unused).is_none());
        assert!(g.get(c).is_none());
    }

    #[test]
    fn non_scalar_loss_is_shape_error() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones([1, 1, 2, 2]));
        assert!(matches!(tape.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn foreign_loss_is_tape_error() {
        let a = Tape::<f64>::new();
        let b = Tape::<f64>::new();
        let x = b.leaf(Tensor::scalar(1.0));
        let loss = x.sum();
        assert!(matches!(a.backward(loss), Err(Error::Tape(_))));
    }

    #[test]
    fn mixing_tapes_in_an_op_is_tape_error() {
        let a = Tape::<f64>::new();
        let b = Tape::<f64>::new();
        let x = a.leaf(Tensor::scalar(1.0));
        let y = b.leaf(Tensor::scalar(1.0));
        assert!(matches!(x.add(y), Err(Error::Tape(_))));
    }

    #[test]
    fn constant_only_graph_records_no_backward() {
        let tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::scalar(3.0));
        let y = c.sigmoid();
        assert!(!y.requires_grad());
        let g = tape.backward(y.sum()).unwrap();
        assert!(g.get(c).is_none());
    }
}
