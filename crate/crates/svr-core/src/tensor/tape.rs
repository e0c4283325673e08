use std::cell::RefCell;

use crate::error::{Error, Result};

use super::{Scalar, Tensor};

/// Index of a recorded tensor on the tape.
pub type NodeId = usize;

/// Vector-Jacobian product: maps the gradient of an operation's output to the
/// gradient contribution for one operand.
type VjpFn<S> = Box<dyn Fn(&[S]) -> Vec<S>>;

struct Node<S: Scalar> {
    /// Element count of this node's value (gradients share it).
    len: usize,
    /// Operand nodes with their vector-Jacobian products. Empty for leaves.
    parents: Vec<(NodeId, VjpFn<S>)>,
}

/// Ordered record of executed differentiable operations.
///
/// Operations append nodes in execution order, so every operand of record
/// `i` was produced by a record `< i` or is a leaf; the reverse traversal in
/// [`Tape::backward`] is therefore a valid topological order. A tape is
/// confined to one logical thread and rebuilt per training step.
pub struct Tape<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
    enabled: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            enabled: true,
        }
    }

    /// A tape that records nothing; operations run pure-forward. Used for
    /// evaluation paths where gradients are never requested.
    pub fn disabled() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Register a tensor as a differentiable leaf (`requires_grad = true`).
    pub fn leaf(&self, t: &Tensor<S>) -> Tensor<S> {
        if !self.enabled {
            return t.clone();
        }
        let id = self.push(Node {
            len: t.numel(),
            parents: Vec::new(),
        });
        t.clone().with_node(Some(id))
    }

    fn push(&self, node: Node<S>) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// Record a result whose operands are `inputs`; `vjps[i]` produces the
    /// gradient for `inputs[i]`. Inputs that are not tracked get no node and
    /// their vjp is never invoked.
    pub(crate) fn record(
        &self,
        inputs: &[&Tensor<S>],
        vjps: Vec<VjpFn<S>>,
        result: Tensor<S>,
    ) -> Tensor<S> {
        debug_assert_eq!(inputs.len(), vjps.len());
        if !self.enabled {
            return result;
        }
        let mut parents: Vec<(NodeId, VjpFn<S>)> = Vec::new();
        for (input, vjp) in inputs.iter().zip(vjps) {
            if let Some(id) = input.node() {
                parents.push((id, vjp));
            }
        }
        if parents.is_empty() {
            return result;
        }
        let id = self.push(Node {
            len: result.numel(),
            parents,
        });
        result.with_node(Some(id))
    }

    /// Shape-preserving bookkeeping (reshape): reuse the operand's node.
    pub(crate) fn alias(&self, input: &Tensor<S>, result: Tensor<S>) -> Tensor<S> {
        result.with_node(input.node())
    }

    /// Reverse-mode sweep from a scalar result.
    ///
    /// Gradients are populated by a reverse traversal of the tape and are
    /// deterministic for a fixed tape: two calls return identical values.
    /// Every leaf registered on the tape receives a gradient (zero if the
    /// result does not depend on it).
    pub fn backward(&self, result: &Tensor<S>) -> Result<Gradients<S>> {
        if result.numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar result, shape is {:?}",
                result.shape()
            )));
        }
        let Some(root) = result.node() else {
            return Err(Error::contract(
                "backward requires a result produced on this tape",
            ));
        };
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<S>>> = vec![None; nodes.len()];
        grads[root] = Some(vec![S::one()]);
        for id in (0..=root).rev() {
            let Some(grad_out) = grads[id].take() else {
                continue;
            };
            for (parent, vjp) in &nodes[id].parents {
                let contrib = vjp(&grad_out);
                debug_assert_eq!(contrib.len(), nodes[*parent].len);
                match &mut grads[*parent] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(&contrib) {
                            *a += *c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
            if !nodes[id].parents.is_empty() {
                grads[id] = None;
            } else {
                grads[id] = Some(grad_out);
            }
        }
        // Leaves untouched by the sweep still hold a (zero) gradient.
        for (id, node) in nodes.iter().enumerate() {
            if node.parents.is_empty() && grads[id].is_none() {
                grads[id] = Some(vec![S::zero(); node.len]);
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients produced by [`Tape::backward`], indexed by tape node.
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient with respect to a tracked tensor. `None` when the tensor was
    /// never registered on the tape.
    pub fn wrt(&self, t: &Tensor<S>) -> Option<&[S]> {
        t.node()
            .and_then(|id| self.grads.get(id))
            .and_then(|g| g.as_deref())
    }
}
