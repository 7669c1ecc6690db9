//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends one node holding its output value. Nodes are appended in
//! execution order, so the tape is already topologically sorted and the
//! backward sweep is a single reverse pass.

mod activation;
mod conv;
mod elementwise;
mod linalg;
mod norm;
mod shape;
mod softmax;

pub use conv::{conv2d_forward, conv_output_size};
pub use linalg::rows_from_channels;
pub use norm::{BatchNormMode, BatchNormStats};
pub use shape::{pixel_shuffle_tensor, pixel_unshuffle_tensor};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one recorded op.
///
/// `needs[i]` tells whether input `i` wants a gradient; implementations may
/// return `None` for inputs that do not.
pub trait Backward: Send + Sync {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        grad: &Tensor,
        inputs: &[&Tensor],
        output: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>>;
}

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    op: Option<Box<dyn Backward>>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Records a leaf that collects a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            op: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Appends an op output. The backward closure is kept only when some
    /// input participates in differentiation.
    pub(crate) fn push(
        &mut self,
        value: Tensor,
        inputs: Vec<Var>,
        op: impl Backward + 'static,
    ) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs: if requires_grad { inputs } else { Vec::new() },
            op: if requires_grad { Some(Box::new(op)) } else { None },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Back-propagates from a one-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                "root",
                format!("root must be a scalar, got {:?}", root_value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        let mut visited = 0;
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(Tensor::full(root_value.shape(), 1.0));
        }
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(op) = node.op.as_ref() else { continue };
            let Some(grad) = grads[i].take() else { continue };
            visited += 1;
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&v| self.value(v)).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|&v| self.nodes[v.0].requires_grad)
                .collect();
            let input_grads = op.backward(&grad, &inputs, &node.value, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", op.name());
            for ((&input, g), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                let (Some(g), true) = (g, need) else { continue };
                debug_assert_eq!(g.shape(), self.value(input).shape(), "{}", op.name());
                match &mut grads[input.0] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads, visited })
    }
}

/// Gradients of leaves after a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    visited: usize,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Number of op nodes whose backward ran.
    pub fn visited_nodes(&self) -> usize {
        self.visited
    }
}
