//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Every operation records a node holding its forward value and the ids of
//! its inputs. Because ids are handed out in creation order, a node's inputs
//! always have smaller indices, so a single reverse sweep over the tape
//! visits consumers before producers. Gradients accumulate additively, which
//! makes fan-out (one value feeding several ops) correct without bookkeeping.

use super::conv::{conv2d_dilated, conv2d_grad_bias, conv2d_grad_input, conv2d_grad_kernels, ConvSpec};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in one specific [`Graph`]; not valid across graphs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Square(NodeId),
    Exp(NodeId),
    Scale(NodeId, f64),
    LRelu(NodeId, f64),
    Mean(NodeId),
    Reshape(NodeId),
    Conv2d { input: NodeId, kernels: NodeId, bias: NodeId, spec: ConvSpec },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Graph {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, grad: None, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Insert an input or parameter; leaves receive gradients but do not
    /// propagate further.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward root with respect to this node, if the
    /// node was reachable from that root.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).div(self.value(b))?;
        Ok(self.push(value, Op::Div(a, b)))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).square();
        self.push(value, Op::Square(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).exp();
        self.push(value, Op::Exp(a))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let value = self.value(a).scale(k);
        self.push(value, Op::Scale(a, k))
    }

    pub fn lrelu(&mut self, a: NodeId, alpha: f64) -> NodeId {
        let value = self.value(a).lrelu(alpha);
        self.push(value, Op::LRelu(a, alpha))
    }

    /// Mean over all elements, produced as a `[1]` tensor.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(self.value(a).reduce_mean()?);
        Ok(self.push(value, Op::Mean(a)))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    pub fn conv2d(&mut self, input: NodeId, kernels: NodeId, bias: NodeId, spec: ConvSpec) -> Result<NodeId> {
        let value = conv2d_dilated(self.value(input), self.value(kernels), self.value(bias), spec)?;
        Ok(self.push(value, Op::Conv2d { input, kernels, bias, spec }))
    }

    /// Smallest |pre-activation| seen by any leaky rectifier on the tape.
    ///
    /// Finite-difference checks are only trustworthy away from the rectifier
    /// kink; callers use this to reject instances that sit too close to it.
    pub fn min_abs_lrelu_input(&self) -> Option<f64> {
        let mut min: Option<f64> = None;
        for node in &self.nodes {
            if let Op::LRelu(a, _) = node.op {
                for &v in self.nodes[a.0].value.data() {
                    let av = v.abs();
                    min = Some(min.map_or(av, |m: f64| m.min(av)));
                }
            }
        }
        min
    }

    fn accumulate(&mut self, id: NodeId, delta: Tensor) -> Result<()> {
        match &mut self.nodes[id.0].grad {
            Some(g) => g.add_assign(&delta),
            slot @ None => {
                *slot = Some(delta);
                Ok(())
            }
        }
    }

    /// Reverse sweep from a scalar root. After it returns, every node the
    /// root depends on holds d(root)/d(node) in its grad slot; prior
    /// gradients on the tape are cleared first.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[root.0].grad = Some(Tensor::filled(self.nodes[root.0].value.shape(), 1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = self.nodes[idx].grad.clone() else { continue };
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate(a, g.clone())?;
                    self.accumulate(b, g)?;
                }
                Op::Sub(a, b) => {
                    self.accumulate(a, g.clone())?;
                    self.accumulate(b, g.scale(-1.0))?;
                }
                Op::Mul(a, b) => {
                    let ga = g.hadamard(&self.nodes[b.0].value)?;
                    let gb = g.hadamard(&self.nodes[a.0].value)?;
                    self.accumulate(a, ga)?;
                    self.accumulate(b, gb)?;
                }
                Op::Div(a, b) => {
                    // c = a/b: dc/da = 1/b, dc/db = -c/b.
                    let ga = g.div(&self.nodes[b.0].value)?;
                    let gb = g
                        .hadamard(&self.nodes[idx].value)?
                        .div(&self.nodes[b.0].value)?
                        .scale(-1.0);
                    self.accumulate(a, ga)?;
                    self.accumulate(b, gb)?;
                }
                Op::Square(a) => {
                    let ga = g.hadamard(&self.nodes[a.0].value.scale(2.0))?;
                    self.accumulate(a, ga)?;
                }
                Op::Exp(a) => {
                    // Reuse the forward value: d exp(x) = exp(x).
                    let ga = g.hadamard(&self.nodes[idx].value)?;
                    self.accumulate(a, ga)?;
                }
                Op::Scale(a, k) => {
                    self.accumulate(a, g.scale(k))?;
                }
                Op::LRelu(a, alpha) => {
                    // Subgradient alpha at exactly zero.
                    let mask = self.nodes[a.0].value.map(|v| if v > 0.0 { 1.0 } else { alpha });
                    self.accumulate(a, g.hadamard(&mask)?)?;
                }
                Op::Mean(a) => {
                    let n = self.nodes[a.0].value.len();
                    let fill = g.data()[0] / n as f64;
                    self.accumulate(a, Tensor::filled(self.nodes[a.0].value.shape(), fill))?;
                }
                Op::Reshape(a) => {
                    let ga = g.reshape(self.nodes[a.0].value.shape())?;
                    self.accumulate(a, ga)?;
                }
                Op::Conv2d { input, kernels, bias, spec } => {
                    let gi = conv2d_grad_input(&g, &self.nodes[kernels.0].value, spec)?;
                    let gk = conv2d_grad_kernels(&g, &self.nodes[input.0].value, spec)?;
                    let gb = conv2d_grad_bias(&g)?;
                    self.accumulate(input, gi)?;
                    self.accumulate(kernels, gk)?;
                    self.accumulate(bias, gb)?;
                }
            }
        }
        Ok(())
    }
}
