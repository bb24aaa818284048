//! Arena-based reverse-mode differentiation.
//!
//! A [`Graph`] owns every node created during one forward pass. Nodes are
//! appended in topological order, so the backward sweep is a single reverse
//! iteration. Values are shared via `Rc`, which keeps parameter tensors
//! zero-copy and makes VJP closures cheap to build.
//!
//! One graph serves one forward/backward cycle; the backward pass consumes
//! the graph and calling it twice is reported as misuse.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type Vjp = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    parents: Vec<Var>,
    vjp: Option<Vjp>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a leaf holding `value`. Gradients are accumulated for it when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.leaf_shared(Rc::new(value), requires_grad)
    }

    /// Leaf over an existing shared tensor (no copy). Used for parameters.
    pub fn leaf_shared(&mut self, value: Rc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad, parents: Vec::new(), vjp: None });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn constant_shared(&mut self, value: Rc<Tensor>) -> Var {
        self.leaf_shared(value, false)
    }

    /// Appends an operation node. `vjp` maps the node's output gradient to
    /// per-parent gradient contributions (aligned with `parents`, `None` for
    /// parents that need no gradient).
    pub(crate) fn push_op(
        &mut self,
        value: Tensor,
        parents: Vec<Var>,
        vjp: impl Fn(&Tensor) -> Vec<Option<Tensor>> + 'static,
    ) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            parents,
            vjp: if requires_grad { Some(Box::new(vjp)) } else { None },
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn value_rc(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Reverse sweep from a scalar `loss`. Fills gradients for every
    /// reachable node with `requires_grad`; interior gradients are released
    /// as soon as they have been propagated.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Graph(
                "backward called twice on the same graph; run a new forward pass first".to_string(),
            ));
        }
        self.consumed = true;
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::Graph(format!(
                "backward requires a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        if !lt.scalar_value().is_finite() {
            return Err(Error::Numeric(format!(
                "loss is not finite: {}",
                lt.scalar_value()
            )));
        }
        self.grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            if self.grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(vjp) = self.nodes[i].vjp.as_ref() else { continue };
            let grad = self.grads[i].take().expect("grad present");
            let contributions = vjp(&grad);
            debug_assert_eq!(contributions.len(), self.nodes[i].parents.len());
            let parents = self.nodes[i].parents.clone();
            for (parent, contrib) in parents.into_iter().zip(contributions) {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                let Some(c) = contrib else { continue };
                debug_assert_eq!(
                    c.shape(),
                    self.nodes[parent.0].value.shape(),
                    "vjp contribution shape mismatch"
                );
                match &mut self.grads[parent.0] {
                    Some(acc) => acc.add_assign(&c),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Ok(())
    }

    /// Gradient accumulated for `v` by the last [`Graph::backward`] call.
    /// Interior node gradients are dropped during the sweep; leaves keep theirs.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let loss = g.sum(p);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(p).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_sum_gradient_is_two_x() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let sq = g.mul(p, p);
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(p).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_twice_is_misuse() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::scalar(2.0), true);
        let loss = g.mul(p, p);
        g.backward(loss).unwrap();
        let err = g.backward(loss).unwrap_err();
        assert!(matches!(err, Error::Graph(_)));
        assert!(err.to_string().contains("twice"));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::zeros(&[2]), true);
        assert!(g.backward(p).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::scalar(3.0), true);
        let c = g.constant(Tensor::scalar(4.0));
        let prod = g.mul(p, c);
        g.backward(prod).unwrap();
        assert_eq!(g.grad(p).unwrap().scalar_value(), 4.0);
        assert!(g.grad(c).is_none());
    }
}
