//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Graph`] owns every tensor produced during a forward pass in an arena
//! indexed by [`TensorId`]. Each operation appends one node; insertion order
//! is the topological order, and [`Graph::backward`] walks the node list in
//! strict reverse, accumulating gradients additively so fan-out works without
//! any bookkeeping by the caller.
//!
//! Gradients are stored next to (not inside) the tensors so the backward pass
//! can read activations while writing gradients. A second `backward` call on
//! the same graph is an error until [`Graph::reset_grads`] is called.

mod ops;
pub mod gradcheck;

use crate::scalar::Scalar;

/// Handle to a tensor stored in a [`Graph`] arena.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct TensorId(pub(crate) usize);

/// A dense tensor: row-major data plus shape. Gradient lives in the graph.
#[derive(Clone, Debug)]
pub struct Tensor<S> {
    pub shape: Vec<usize>,
    pub data: Vec<S>,
    /// Leaf flag: gradient is retained for this tensor after backward.
    pub requires_grad: bool,
    /// True when this tensor is on a path from a `requires_grad` leaf, i.e.
    /// the backward pass must propagate through it.
    pub(crate) needs_grad: bool,
}

#[derive(Debug)]
pub(crate) struct Node {
    op: ops::Op,
    out: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: expected a scalar (1 element), got {len} elements")]
    NotScalar { op: &'static str, len: usize },
    #[error("backward already ran on this graph; call reset_grads first")]
    BackwardWithoutReset,
    #[error("{op}: {detail}")]
    InvalidArg { op: &'static str, detail: String },
}

pub type TensorResult = Result<TensorId, TensorError>;

/// Wengert tape: tensor arena + append-only node list.
pub struct Graph<S: Scalar> {
    tensors: Vec<Tensor<S>>,
    grads: Vec<Option<Vec<S>>>,
    nodes: Vec<Node>,
    backward_done: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { tensors: Vec::new(), grads: Vec::new(), nodes: Vec::new(), backward_done: false }
    }

    /// Inserts a leaf tensor. `data.len()` must equal the shape volume.
    pub fn leaf(&mut self, data: Vec<S>, shape: Vec<usize>, requires_grad: bool) -> TensorResult {
        let volume: usize = shape.iter().product();
        if data.len() != volume {
            return Err(TensorError::Shape {
                op: "leaf",
                detail: format!("data length {} does not match shape {:?} (volume {})", data.len(), shape, volume),
            });
        }
        Ok(self.insert(Tensor { shape, data, requires_grad, needs_grad: requires_grad }))
    }

    /// Leaf that never receives a gradient (inputs, targets, masks).
    pub fn constant(&mut self, data: Vec<S>, shape: Vec<usize>) -> TensorResult {
        self.leaf(data, shape, false)
    }

    pub fn data(&self, id: TensorId) -> &[S] {
        &self.tensors[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.tensors[id.0].shape
    }

    /// Scalar value of a 1-element tensor.
    pub fn value(&self, id: TensorId) -> S {
        debug_assert_eq!(self.tensors[id.0].data.len(), 1);
        self.tensors[id.0].data[0]
    }

    /// Gradient of `id`, if one was accumulated by `backward`.
    pub fn grad(&self, id: TensorId) -> Option<&[S]> {
        self.grads[id.0].as_deref()
    }

    pub fn num_tensors(&self) -> usize {
        self.tensors.len()
    }

    /// Reverse pass from a scalar loss. Gradients accumulate additively
    /// across fan-out; nodes not on a differentiable path are skipped.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardWithoutReset);
        }
        let lt = &self.tensors[loss.0];
        if lt.data.len() != 1 {
            return Err(TensorError::NotScalar { op: "backward", len: lt.data.len() });
        }
        self.backward_done = true;
        if !lt.needs_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![S::one()]);
        for node in self.nodes.iter().rev() {
            if !self.tensors[node.out].needs_grad {
                continue;
            }
            let Some(gout) = self.grads[node.out].take() else { continue };
            ops::backward_node(&self.tensors, &mut self.grads, &node.op, &gout);
            self.grads[node.out] = Some(gout);
        }
        Ok(())
    }

    /// Clears all gradients and re-arms `backward`. The backward pass after a
    /// reset is bitwise identical to the first.
    pub fn reset_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
        self.backward_done = false;
    }

    fn insert(&mut self, t: Tensor<S>) -> TensorId {
        self.tensors.push(t);
        self.grads.push(None);
        TensorId(self.tensors.len() - 1)
    }

    /// Appends an op node and its output tensor. Debug builds verify the
    /// output is finite, which catches numeric blowups at the op that
    /// produced them.
    fn push(&mut self, op: ops::Op, data: Vec<S>, shape: Vec<usize>, needs_grad: bool) -> TensorId {
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite output produced by {:?}",
            op
        );
        let id = self.insert(Tensor { shape, data, requires_grad: false, needs_grad });
        self.nodes.push(Node { op, out: id.0 });
        id
    }

    fn needs(&self, id: TensorId) -> bool {
        self.tensors[id.0].needs_grad
    }
}

#[cfg(test)]
mod tests;
