//! A thin Wengert tape over [`DiffOp`] nodes.
//!
//! The tape records values in execution order; `backward` replays the nodes in
//! reverse, asking each op only for the cotangents that lead to a requested
//! leaf.

use std::sync::Arc;

use super::ops::DiffOp;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

struct Node {
    value: Tensor,
    op: Option<(Arc<dyn DiffOp>, Vec<NodeId>)>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node { value, op: None });
        NodeId(self.nodes.len() - 1)
    }

    pub fn apply(&mut self, op: Arc<dyn DiffOp>, inputs: &[NodeId]) -> Result<NodeId> {
        let value = {
            let args: Vec<&Tensor> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
            op.forward(&args)?
        };
        self.nodes.push(Node {
            value,
            op: Some((op, inputs.to_vec())),
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bytes held by recorded values.
    pub fn value_bytes(&self) -> usize {
        self.nodes.iter().map(|n| n.value.len() * 8).sum()
    }

    /// Reverse pass from `output` seeded with `cot`; returns one cotangent per
    /// entry of `wrt` (zeros when a leaf does not influence the output).
    pub fn backward(&self, output: NodeId, cot: Tensor, wrt: &[NodeId]) -> Result<Vec<Tensor>> {
        if cot.shape() != self.value(output).shape() {
            return Err(Error::dim(
                "tape backward",
                format!(
                    "cotangent {:?} vs output {:?}",
                    cot.shape(),
                    self.value(output).shape()
                ),
            ));
        }
        // reach[i]: node i depends on some requested leaf
        let mut reach = vec![false; self.nodes.len()];
        for id in wrt {
            reach[id.0] = true;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some((_, inputs)) = &node.op {
                if inputs.iter().any(|j| reach[j.0]) {
                    reach[i] = true;
                }
            }
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(cot);
        for i in (0..=output.0).rev() {
            let Some((op, inputs)) = &self.nodes[i].op else {
                continue;
            };
            if !reach[i] {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            let needs: Vec<bool> = inputs.iter().map(|j| reach[j.0]).collect();
            let args: Vec<&Tensor> = inputs.iter().map(|j| &self.nodes[j.0].value).collect();
            let cots = op.vjp(&args, &self.nodes[i].value, &g, &needs)?;
            for (j, c) in inputs.iter().zip(cots) {
                if let Some(c) = c {
                    match &mut grads[j.0] {
                        Some(acc) => acc.axpy(1.0, &c)?,
                        slot => *slot = Some(c),
                    }
                }
            }
        }
        Ok(wrt
            .iter()
            .map(|id| {
                grads[id.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[id.0].value.shape().to_vec()))
            })
            .collect())
    }
}
