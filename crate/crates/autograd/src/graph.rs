//! The computation graph: an append-only arena of nodes.
//!
//! Nodes are pushed after their parents, so index order is a topological
//! order and the graph cannot contain cycles.

use std::collections::BTreeMap;

use crate::error::{AutogradError, Result};
use crate::ops::{self, OpKind};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Origin {
    Leaf,
    Op { kind: OpKind, inputs: Vec<Var> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    origin: Origin,
    requires_grad: bool,
    /// Accumulated gradient; only populated on leaves.
    grad: Option<Tensor>,
}

/// Gradients of one backward pass, keyed by leaf variable.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    map: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.map.get(&var)
    }

    /// Removes and returns the gradient for `var`.
    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.map.remove(&var)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Var, &Tensor)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    branch_hash: u64,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            branch_hash: FNV_OFFSET,
        }
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            origin: Origin::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn node(&self, var: Var) -> Result<&Node> {
        self.nodes.get(var.0).ok_or(AutogradError::UnknownVar(var.0))
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Fingerprint of every piecewise branch taken so far (relu, clamp, std floor).
    pub fn branch_signature(&self) -> u64 {
        self.branch_hash
    }

    /// Records `kind` applied to `inputs` and returns the output node.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        for v in inputs {
            self.node(*v)?;
        }
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let value = ops::forward(&kind, &values)?;
        if let Some(codes) = ops::branch_codes(&kind, &values) {
            let mut h = self.branch_hash;
            for c in codes {
                h ^= u64::from(c);
                h = h.wrapping_mul(FNV_PRIME);
            }
            self.branch_hash = h;
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            origin: Origin::Op {
                kind,
                inputs: inputs.to_vec(),
            },
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Div, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Matmul, &[a, b])
    }

    pub fn conv1d(&mut self, x: Var, weight: Var, bias: Option<Var>, padding: usize, dilation: usize) -> Result<Var> {
        let kind = OpKind::Conv1d { padding, dilation };
        match bias {
            Some(b) => self.apply(kind, &[x, weight, b]),
            None => self.apply(kind, &[x, weight]),
        }
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Relu, &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Log, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Exp, &[x])
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Sqrt, &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Mul, &[x, x])
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(OpKind::MeanAxis { axis }, &[x])
    }

    pub fn std_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(OpKind::StdAxis { axis }, &[x])
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(OpKind::SumAxis { axis }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Sum, &[x])
    }

    /// Mean of all elements as a `[1]` tensor.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.apply(OpKind::Concat { axis }, parts)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.apply(OpKind::Slice { axis, start, end }, &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(OpKind::Scale(c), &[x])
    }

    pub fn shift(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(OpKind::Shift(c), &[x])
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.apply(OpKind::Clamp { lo, hi }, &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Transpose, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(OpKind::Reshape(shape.to_vec()), &[x])
    }

    pub fn expand(&mut self, x: Var, axis: usize, extent: usize) -> Result<Var> {
        self.apply(OpKind::Expand { axis, extent }, &[x])
    }

    pub fn frames(&mut self, x: Var, len: usize, hop: usize) -> Result<Var> {
        self.apply(OpKind::Frames { len, hop }, &[x])
    }

    /// Dot product of two equal-shape tensors as a `[1]` tensor.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    /// Euclidean norm of all elements as a `[1]` tensor.
    pub fn norm(&mut self, x: Var) -> Result<Var> {
        let s = self.dot(x, x)?;
        self.sqrt(s)
    }

    /// Cosine similarity of two equal-shape tensors as a `[1]` tensor.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.dot(a, b)?;
        let na = self.norm(a)?;
        let nb = self.norm(b)?;
        let den = self.mul(na, nb)?;
        self.div(d, den)
    }

    /// Propagates `d loss / d leaf` to every leaf reachable from `loss`.
    ///
    /// Leaf gradients also accumulate into the graph's grad slots, so calling
    /// this twice without [`Graph::zero_grad`] doubles them. Leaves that
    /// require gradients but are unreachable receive zeros.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let root = self.node(loss)?;
        if root.value.numel() != 1 {
            return Err(AutogradError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut pending: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        pending[loss.0] = Some(Tensor::full(root.value.shape().to_vec(), 1.0));
        let mut grads = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(grad) = pending[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.origin {
                Origin::Leaf => {
                    if node.requires_grad {
                        grads.map.insert(Var(idx), grad);
                    }
                }
                Origin::Op { kind, inputs } => {
                    let needs: Vec<bool> = inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
                    if !needs.iter().any(|&n| n) {
                        continue;
                    }
                    let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                    let input_grads = ops::backward(kind, &values, &node.value, &grad, &needs);
                    for (v, g) in inputs.iter().zip(input_grads) {
                        if let Some(g) = g {
                            match &mut pending[v.0] {
                                Some(acc) => acc.add_assign(&g),
                                slot @ None => *slot = Some(g),
                            }
                        }
                    }
                }
            }
        }

        for (idx, node) in self.nodes.iter_mut().enumerate() {
            if !(node.requires_grad && matches!(node.origin, Origin::Leaf)) {
                continue;
            }
            let g = grads
                .map
                .entry(Var(idx))
                .or_insert_with(|| Tensor::zeros(node.value.shape().to_vec()));
            match &mut node.grad {
                Some(acc) => acc.add_assign(g),
                slot @ None => *slot = Some(g.clone()),
            }
        }
        Ok(grads)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, var: Var) -> Option<&Tensor> {
        self.nodes.get(var.0).and_then(|n| n.grad.as_ref())
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }
}
