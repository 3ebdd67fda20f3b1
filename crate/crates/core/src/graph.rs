//! Reverse-mode automatic differentiation on a per-forward-pass tape.
//!
//! A [`Graph`] records every differentiable operation applied to tracked
//! [`Var`]s in construction order. [`Graph::backward`] walks that record in
//! exact reverse order, summing the gradient contributions of every consumer
//! of a node before the node's own backward rule runs. Since nodes are only
//! ever appended after their inputs, reverse construction order is a valid
//! reverse topological order.
//!
//! An inference graph ([`Graph::inference`]) records nothing: operations
//! compute values only and intermediates are freed as soon as their last
//! [`Var`] handle is dropped.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{ensure, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Index of a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// A value produced inside a [`Graph`]. Cloning is cheap (shared storage).
#[derive(Clone)]
pub struct Var<T> {
    id: Option<NodeId>,
    value: Rc<Tensor<T>>,
}

impl<T: Scalar> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub(crate) fn value_rc(&self) -> Rc<Tensor<T>> {
        Rc::clone(&self.value)
    }

    pub fn shape(&self) -> Shape {
        self.value.shape()
    }

    pub fn id(&self) -> Option<NodeId> {
        self.id
    }

    /// Whether gradients flow to this value.
    pub fn requires_grad(&self) -> bool {
        self.id.is_some()
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        (*self.value).clone()
    }

    /// The single element of a `(1, 1, 1, 1)` value.
    pub fn scalar(&self) -> Result<T> {
        ensure!(self.value.numel() == 1, "expected a scalar, got shape {}", self.shape());
        Ok(self.value.data()[0])
    }
}

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("value", &self.value)
            .finish()
    }
}

/// Backward rule: receives the upstream gradient and a mask of which inputs
/// need a gradient; returns one optional gradient per input.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    inputs: Vec<Option<NodeId>>,
    backward: Option<BackwardFn<T>>,
    shape: Shape,
}

/// Operation tape for one forward pass.
pub struct Graph<T> {
    recording: bool,
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// A recording graph; gradients are available through [`Graph::backward`].
    pub fn new() -> Self {
        Graph {
            recording: true,
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// A graph that records no tape.
    pub fn inference() -> Self {
        Graph {
            recording: false,
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A trainable input: gradients are accumulated for it.
    pub fn leaf(&self, value: Tensor<T>) -> Var<T> {
        self.leaf_rc(Rc::new(value))
    }

    pub(crate) fn leaf_rc(&self, value: Rc<Tensor<T>>) -> Var<T> {
        if !self.recording {
            return Var { id: None, value };
        }
        let id = self.push(Node {
            inputs: Vec::new(),
            backward: None,
            shape: value.shape(),
        });
        Var { id: Some(id), value }
    }

    /// A value that gradients do not flow into.
    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        Var {
            id: None,
            value: Rc::new(value),
        }
    }

    fn push(&self, node: Node<T>) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        NodeId(nodes.len() - 1)
    }

    /// Record an operation output. The backward rule is kept only when the
    /// graph records and at least one input is tracked.
    pub(crate) fn record<F>(&self, value: Tensor<T>, inputs: &[&Var<T>], backward: F) -> Var<T>
    where
        F: Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    {
        let value = Rc::new(value);
        if !self.recording || inputs.iter().all(|v| v.id.is_none()) {
            return Var { id: None, value };
        }
        let id = self.push(Node {
            inputs: inputs.iter().map(|v| v.id).collect(),
            backward: Some(Box::new(backward)),
            shape: value.shape(),
        });
        Var { id: Some(id), value }
    }

    /// Back-propagate from a scalar `loss`. The returned [`Gradients`] hold
    /// `∂loss/∂leaf` for every leaf reachable from `loss`.
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        ensure!(
            loss.value.numel() == 1,
            "backward needs a scalar loss, got shape {}",
            loss.shape()
        );
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        let Some(root) = loss.id else {
            return Ok(Gradients { grads });
        };
        grads[root.0] = Some(Tensor::ones(loss.shape()));

        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue; // leaf: keep its gradient
            };
            let Some(upstream) = grads[i].take() else {
                continue; // not reachable from the loss
            };
            debug_assert_eq!(upstream.shape(), node.shape);
            let needs: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
            let parts = backward(&upstream, &needs);
            debug_assert_eq!(parts.len(), node.inputs.len());
            for (input, part) in node.inputs.iter().zip(parts) {
                if let (Some(input), Some(part)) = (input, part) {
                    debug_assert_eq!(part.shape(), nodes[input.0].shape);
                    match &mut grads[input.0] {
                        Some(acc) => acc.add_assign(&part),
                        slot @ None => *slot = Some(part),
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `var`, or `None` when it is untracked or unreachable from the loss.
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        var.id.and_then(|id| self.grads.get(id.0)?.as_ref())
    }

    /// Gradient for `var`, zeros when unreachable.
    pub fn get_or_zeros(&self, var: &Var<T>) -> Tensor<T> {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(var.shape()))
    }

    pub fn take(&mut self, var: &Var<T>) -> Option<Tensor<T>> {
        var.id.and_then(|id| self.grads.get_mut(id.0)?.take())
    }
}
