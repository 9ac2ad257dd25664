//! Tape-based reverse-mode differentiation over the kernel primitives.
//!
//! A [`Tape`] records one forward pass as a flat list of nodes; each node
//! holds its output value and enough structure to push adjoints to its
//! inputs. [`Var`] is a copyable handle into the tape with the same method
//! surface as the eager [`Tensor`] ops, so differentiable code reads exactly
//! like kernel code. Forward values are computed eagerly by the same tensor
//! kernels, which keeps taped forwards bit-identical to eager ones.
//!
//! One tape records one forward and runs one backward; distinct tapes are
//! independent. Gradient accumulation visits nodes in strictly decreasing id
//! order and inputs in argument order, so gradients are bit-stable across
//! runs.

mod attention;
mod gradcheck;
mod ops;

pub use attention::{
    attention_diff, canonical_diff, flow_causal_diff, flow_normal_diff, linear_baseline_diff,
};
pub use gradcheck::{finite_diff_check, primitive_gradcheck, GradCheckReport, FD_STEP};

use crate::error::{FlowError, Result};
use crate::tensor::Tensor;
use std::cell::RefCell;
use std::collections::BTreeMap;

pub type Grads = BTreeMap<String, Tensor>;

pub(crate) type NodeId = usize;

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
}

/// Recorded operation: input ids plus whatever the adjoint needs.
pub(crate) enum Op {
    Leaf { name: Option<String> },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Matmul(NodeId, NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Relu(NodeId),
    EluPlusOne(NodeId),
    SoftmaxAxis(NodeId, usize),
    CumsumAxis(NodeId, usize),
    StableDiv(NodeId, NodeId, f64),
    LayerNorm(NodeId, NodeId, NodeId, f64),
    SumAxis(NodeId, usize),
    BroadcastAxis(NodeId, usize),
    TransposeLast2(NodeId),
    Reshape(NodeId),
    ContractSeq(NodeId, NodeId),
    ApplyPerHead(NodeId, NodeId),
    ScoresQk(NodeId, NodeId),
    AttnApplyV(NodeId, NodeId),
    CausalDotProduct(NodeId, NodeId, NodeId),
    CausalCompetition(NodeId),
    GatherRows(NodeId, Vec<usize>),
    CrossEntropy { logits: NodeId, targets: Vec<usize>, mask: Vec<bool> },
    SumAll(NodeId),
}

pub struct Tape {
    pub(crate) inner: RefCell<TapeState>,
}

pub(crate) struct TapeState {
    pub(crate) nodes: Vec<Node>,
    backward_done: bool,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: NodeId,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape { inner: RefCell::new(TapeState { nodes: Vec::new(), backward_done: false }) }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Named differentiable leaf; its gradient appears under `name` in the
    /// map `backward` returns.
    pub fn input(&self, name: &str, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf { name: Some(name.to_string()) })
    }

    /// Non-differentiable value (masks, positions, detached activations).
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf { name: None })
    }

    pub(crate) fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut state = self.inner.borrow_mut();
        state.nodes.push(Node { value, op });
        Var { tape: self, id: state.nodes.len() - 1 }
    }

    pub(crate) fn value_of(&self, id: NodeId) -> Tensor {
        self.inner.borrow().nodes[id].value.clone()
    }

    /// Reverse pass from a scalar loss. Returns gradients for every named
    /// leaf that the loss actually depends on. One backward per tape.
    pub fn backward(&self, loss: Var<'_>) -> Result<Grads> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(FlowError::contract("backward", "loss variable belongs to a different tape"));
        }
        let mut state = self.inner.borrow_mut();
        if state.backward_done {
            return Err(FlowError::contract("backward", "this tape has already run a backward pass"));
        }
        state.backward_done = true;
        let nodes = &state.nodes;
        if nodes[loss.id].value.len() != 1 {
            return Err(FlowError::contract(
                "backward",
                format!("loss must be a scalar, got shape {:?}", nodes[loss.id].value.shape()),
            ));
        }

        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.id).rev() {
            let Some(grad) = grads[id].take() else { continue };
            ops::push_adjoints(nodes, id, &grad, &mut grads)?;
            if let Op::Leaf { name: Some(_) } = nodes[id].op {
                grads[id] = Some(grad); // keep for the result map
            }
        }

        let mut out = Grads::new();
        for (id, node) in nodes.iter().enumerate() {
            if let Op::Leaf { name: Some(name) } = &node.op {
                if let Some(g) = grads[id].take() {
                    out.insert(name.clone(), g);
                }
            }
        }
        Ok(out)
    }
}

impl<'t> Var<'t> {
    /// Detached copy of this node's value.
    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.shape().to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::tensor::max_rel_err;

    #[test]
    fn backward_requires_scalar_loss() {
        let tape = Tape::new();
        let x = tape.input("x", Tensor::ones(vec![3]).unwrap());
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, FlowError::Contract { .. }), "got {err}");
    }

    #[test]
    fn backward_runs_once_per_tape() {
        let tape = Tape::new();
        let x = tape.input("x", Tensor::ones(vec![2]).unwrap());
        let loss = x.sum_all();
        tape.backward(loss).unwrap();
        let err = tape.backward(loss).unwrap_err();
        assert!(err.to_string().contains("already"));
    }

    #[test]
    fn unused_leaves_get_no_gradient() {
        let tape = Tape::new();
        let x = tape.input("x", Tensor::ones(vec![2]).unwrap());
        let _unused = tape.input("unused", Tensor::ones(vec![2]).unwrap());
        let loss = x.sum_all();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.contains_key("x"));
        assert!(!grads.contains_key("unused"));
    }

    #[test]
    fn fan_out_accumulates_additively() {
        // loss = sum(x * x) + sum(x) => dloss/dx = 2x + 1.
        let tape = Tape::new();
        let value = Tensor::from_vec(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let x = tape.input("x", value.clone());
        let loss = x.mul(x).sum_all().add(x.sum_all());
        let grads = tape.backward(loss).unwrap();
        let want = value.scale(2.0).add_scalar(1.0);
        assert!(max_rel_err(&grads["x"], &want) <= 1e-14);
    }

    #[test]
    fn gradients_are_bit_identical_across_runs() {
        let run = || {
            let tape = Tape::new();
            let mut rng = seeded(99);
            let q = tape.input("q", Tensor::rand_uniform(&mut rng, vec![4, 6], -1.0, 1.0).unwrap());
            let k = tape.input("k", Tensor::rand_uniform(&mut rng, vec![4, 6], -1.0, 1.0).unwrap());
            let v = tape.input("v", Tensor::rand_uniform(&mut rng, vec![4, 6], -1.0, 1.0).unwrap());
            let cfg = crate::attention::AttentionConfig { heads: 2, ..Default::default() };
            let (out, _) = super::flow_normal_diff(q, k, v, &cfg);
            let grads = tape.backward(out.sum_all()).unwrap();
            grads
        };
        let a = run();
        let b = run();
        for (name, ga) in &a {
            assert_eq!(ga.data(), b[name].data(), "gradient {name} must be deterministic");
        }
    }
}
