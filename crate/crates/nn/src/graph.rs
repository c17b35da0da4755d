//! Tape of recorded operations and reverse-mode traversal.

use crate::error::{NnError, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of one recorded operation.
pub(crate) trait Operation {
    fn name(&self) -> &'static str;
    fn inputs(&self) -> Vec<Var>;
    /// One gradient contribution per input, in `inputs()` order. Entries
    /// for inputs with `needs[i] == false` may be `None`.
    fn backward(&self, graph: &Graph, out: Var, grad_out: &[f32], needs: &[bool]) -> Vec<Option<Vec<f32>>>;
}

struct Node {
    tensor: Tensor,
    op: Option<Box<dyn Operation>>,
}

/// Counters collected while the forward pass runs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GraphStats {
    /// Attention score slots evaluated, summed over batch and heads.
    pub attention_score_entries: u64,
}

/// Execution mode shared by every op recorded on one graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GraphMode {
    pub training: bool,
    pub seed: u64,
    /// Optimizer step; keys the dropout masks together with the seed.
    pub step: u64,
}

impl GraphMode {
    pub fn eval() -> Self {
        Self { training: false, seed: 0, step: 0 }
    }

    pub fn train(seed: u64, step: u64) -> Self {
        Self { training: true, seed, step }
    }
}

/// Append-only computation graph. Nodes are stored in creation order, which
/// is a topological order; backward walks it in reverse.
pub struct Graph {
    nodes: Vec<Node>,
    mode: GraphMode,
    consumed: bool,
    stats: GraphStats,
}

impl Graph {
    pub fn new(mode: GraphMode) -> Self {
        Self { nodes: Vec::new(), mode, consumed: false, stats: GraphStats::default() }
    }

    pub fn mode(&self) -> GraphMode {
        self.mode
    }

    pub fn is_training(&self) -> bool {
        self.mode.training
    }

    pub fn stats(&self) -> &GraphStats {
        &self.stats
    }

    pub(crate) fn stats_mut(&mut self) -> &mut GraphStats {
        &mut self.stats
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor. Its `requires_grad` flag decides whether
    /// backward fills its gradient.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.nodes.push(Node { tensor, op: None });
        Var(self.nodes.len() - 1)
    }

    /// Shorthand for a leaf that receives gradients.
    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// Shorthand for a leaf that never receives gradients.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub(crate) fn push_op(&mut self, shape: Vec<usize>, data: Vec<f32>, op: Box<dyn Operation>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.value(*v).requires_grad());
        let tensor = Tensor::new(shape, data)
            .expect("op produced data inconsistent with its shape")
            .with_requires_grad(requires_grad);
        self.nodes.push(Node { tensor, op: Some(op) });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].tensor.shape()
    }

    pub fn data(&self, v: Var) -> &[f32] {
        self.nodes[v.0].tensor.data()
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].tensor.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].tensor.requires_grad()
    }

    /// Removes the gradient of `v`, leaving `None` behind.
    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f32>> {
        self.nodes[v.0].tensor.take_grad()
    }

    /// Name of the operation that produced `v`, or `"leaf"`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.as_ref().map_or("leaf", |op| op.name())
    }

    /// Propagates d(loss)/d(node) to every node that requires gradients.
    /// Gradients from several consumers of one node are summed. A graph can
    /// be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(NnError::GraphConsumed);
        }
        let shape = self.shape(loss).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(NnError::NotScalar(shape));
        }
        self.consumed = true;
        if !self.requires_grad(loss) {
            return Ok(());
        }
        self.nodes[loss.0].tensor.set_grad(Some(vec![1.0]));

        for i in (0..=loss.0).rev() {
            let Some(op) = self.nodes[i].op.as_ref() else {
                continue;
            };
            let Some(grad_out) = self.nodes[i].tensor.grad() else {
                continue;
            };
            let inputs = op.inputs();
            let needs: Vec<bool> = inputs.iter().map(|v| self.requires_grad(*v)).collect();
            if !needs.iter().any(|n| *n) {
                continue;
            }
            let contributions = op.backward(self, Var(i), grad_out, &needs);
            debug_assert_eq!(contributions.len(), inputs.len());
            for ((input, need), contribution) in inputs.iter().zip(&needs).zip(contributions) {
                if let (true, Some(delta)) = (*need, contribution) {
                    self.nodes[input.0].tensor.accumulate_grad(&delta);
                }
            }
        }
        Ok(())
    }
}
