//! The Wengert tape: records operations as they execute and replays their
//! backward rules in reverse topological order.

use super::{Result, Scalar, Shape, Tensor, TensorError};

/// Handle of a recorded node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(pub(crate) usize);

/// Maps an incoming output gradient to per-parent gradient contributions.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T]) -> Vec<(NodeId, Vec<T>)>>;

struct Node<T: Scalar> {
    shape: Shape,
    requires_grad: bool,
    grad: Option<Vec<T>>,
    backward: Option<BackwardFn<T>>,
}

/// A single-threaded recording of one computation. Construction, forward
/// evaluation, and backward all happen on the same tape; parallelism is
/// across independent tapes.
#[derive(Default)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
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

    /// Registers `tensor` as a graph input and returns the tracked handle.
    /// Gradients accumulate only on leaves with `requires_grad`.
    pub fn leaf(&mut self, tensor: &Tensor<T>, requires_grad: bool) -> Tensor<T> {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            shape: tensor.shape(),
            requires_grad,
            grad: None,
            backward: None,
        });
        tensor.detached().with_node(id)
    }

    /// Records an op output. Call only when at least one input is tracked.
    pub(crate) fn record(&mut self, out: Tensor<T>, backward: BackwardFn<T>) -> Tensor<T> {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            shape: out.shape(),
            requires_grad: false,
            grad: None,
            backward: Some(backward),
        });
        out.with_node(id)
    }

    /// Records `out` if any input was tracked, otherwise passes it through.
    /// `make_backward` is only invoked when recording happens, so untracked
    /// forward passes pay nothing for capture.
    pub(crate) fn record_if(
        &mut self,
        out: Tensor<T>,
        tracked: bool,
        make_backward: impl FnOnce() -> BackwardFn<T>,
    ) -> Tensor<T> {
        if tracked {
            let backward = make_backward();
            self.record(out, backward)
        } else {
            out
        }
    }

    /// Runs reverse accumulation from a scalar loss. Each call propagates
    /// its own unit seed; leaf gradients add onto whatever earlier calls
    /// left in place, until [`Tape::zero_grads`] resets them.
    pub fn backward(&mut self, loss: &Tensor<T>) -> Result<()> {
        let root = loss.node().ok_or(TensorError::NotOnTape)?;
        if root.0 >= self.nodes.len() {
            return Err(TensorError::NotOnTape);
        }
        if !loss.shape().is_scalar() {
            return Err(TensorError::NonScalarLoss(loss.shape()));
        }

        let mut flow: Vec<Option<Vec<T>>> = Vec::with_capacity(root.0 + 1);
        flow.resize_with(root.0 + 1, || None);
        flow[root.0] = Some(vec![T::one()]);

        for id in (0..=root.0).rev() {
            let Some(grad) = flow[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            debug_assert_eq!(grad.len(), node.shape.numel());
            if let Some(backward) = &node.backward {
                for (parent, contribution) in backward(&grad) {
                    debug_assert!(parent.0 < id, "tape must be topologically ordered");
                    accumulate(&mut flow[parent.0], contribution);
                }
            }
            if node.requires_grad {
                let node = &mut self.nodes[id];
                accumulate(&mut node.grad, grad);
            }
        }
        Ok(())
    }

    /// The accumulated gradient of a tracked tensor, if any has been set.
    pub fn grad(&self, tensor: &Tensor<T>) -> Option<&[T]> {
        let id = tensor.node()?;
        self.nodes.get(id.0)?.grad.as_deref()
    }

    /// Clears all accumulated gradients, keeping the recording intact.
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, contribution: Vec<T>) {
    match slot {
        None => *slot = Some(contribution),
        Some(acc) => {
            debug_assert_eq!(acc.len(), contribution.len());
            for (a, c) in acc.iter_mut().zip(contribution) {
                *a += c;
            }
        }
    }
}
