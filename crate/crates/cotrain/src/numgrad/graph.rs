//! Computation graph: an append-only tape of primitive applications,
//! replayed in reverse for gradient accumulation.

use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// A differentiable primitive. Implementations add their vector-Jacobian
/// products into the per-input buffers; buffers are `None` for inputs that
/// do not track gradients.
pub trait GraphOp: std::fmt::Debug {
    fn name(&self) -> &'static str;

    /// Accumulate d(loss)/d(input_i) into `input_grads[i]` given the
    /// upstream gradient `out_grad` of this node's output.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        out_grad: &[f64],
        input_grads: &mut [Option<Vec<f64>>],
    );
}

#[derive(Debug)]
struct Node {
    tensor: Tensor,
    inputs: Vec<NodeId>,
    op: Option<Box<dyn GraphOp>>,
}

/// Append-only tape. Nodes are inserted in execution order, so the tape is
/// topologically sorted by construction and acyclic (a node can only refer
/// to earlier nodes).
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf value. Gradient tracking follows the tensor's
    /// `requires_grad` flag.
    pub fn leaf(&mut self, tensor: Tensor) -> NodeId {
        self.nodes.push(Node {
            tensor,
            inputs: Vec::new(),
            op: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Record the application of `op` to `inputs`, producing `output`.
    /// The output tracks gradients iff any input does.
    pub fn apply(
        &mut self,
        op: Box<dyn GraphOp>,
        inputs: &[NodeId],
        output: Tensor,
    ) -> Result<NodeId> {
        let mut requires = false;
        for id in inputs {
            if id.0 >= self.nodes.len() {
                return Err(Error::Contract(format!(
                    "op {} references unknown node {}",
                    op.name(),
                    id.0
                )));
            }
            requires |= self.nodes[id.0].tensor.requires_grad();
        }
        self.nodes.push(Node {
            tensor: output.with_requires_grad(requires),
            inputs: inputs.to_vec(),
            op: Some(op),
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    /// Gradient of the most recent `backward` passes for a node, if any.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad()
    }

    /// Clear every gradient buffer in the tape.
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.tensor.zero_grad();
        }
    }

    /// Reverse-accumulate gradients from a scalar loss node into every
    /// gradient-tracking leaf. Repeated calls accumulate.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract(format!("unknown loss node {}", loss.0)));
        }
        if !self.nodes[loss.0].tensor.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].tensor.shape()
            )));
        }

        let mut adjoints: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adjoints[loss.0] = Some(vec![1.0]);
        let mut leaf_grads: Vec<(usize, Vec<f64>)> = Vec::new();

        for id in (0..=loss.0).rev() {
            let Some(out_grad) = adjoints[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if !node.tensor.requires_grad() {
                continue;
            }
            match &node.op {
                None => leaf_grads.push((id, out_grad)),
                Some(op) => {
                    let inputs: Vec<&Tensor> =
                        node.inputs.iter().map(|i| &self.nodes[i.0].tensor).collect();
                    let mut input_grads: Vec<Option<Vec<f64>>> = node
                        .inputs
                        .iter()
                        .map(|i| {
                            self.nodes[i.0]
                                .tensor
                                .requires_grad()
                                .then(|| vec![0.0; self.nodes[i.0].tensor.numel()])
                        })
                        .collect();
                    op.backward(&inputs, &node.tensor, &out_grad, &mut input_grads);
                    for (input_id, grad) in node.inputs.clone().iter().zip(input_grads) {
                        if let Some(grad) = grad {
                            match &mut adjoints[input_id.0] {
                                Some(acc) => {
                                    for (a, g) in acc.iter_mut().zip(&grad) {
                                        *a += g;
                                    }
                                }
                                slot => *slot = Some(grad),
                            }
                        }
                    }
                }
            }
        }

        for (id, grad) in leaf_grads {
            self.nodes[id].tensor.accumulate_grad(&grad);
        }
        Ok(())
    }
}
