//! Define-by-run expression graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so insertion order is a
//! topological order and the graph is acyclic by construction. Every op
//! validates its operand shapes and computes its value eagerly.

use std::collections::BTreeMap;

use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;

use super::ops::{eval_affine, eval_log_softmax, eval_softmax};
use super::Tensor;

/// Handle of a node inside one [`ExprGraph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Op<T> {
    /// Input tensor; `differentiable` leaves receive gradients.
    Leaf { differentiable: bool },
    /// `W·v + b`.
    Affine { w: NodeId, v: NodeId, b: NodeId },
    Tanh(NodeId),
    Relu(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Elementwise product.
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Sum(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    /// Selects one entry of a vector as a scalar.
    Pick(NodeId, usize),
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    needs_grad: bool,
}

/// Gradients of a scalar output with respect to every differentiable leaf.
#[derive(Debug, Clone, PartialEq)]
pub struct GradResult<T> {
    pub value: Tensor<T>,
    pub grads: BTreeMap<NodeId, Tensor<T>>,
}

impl<T: Scalar> GradResult<T> {
    pub fn grad(&self, leaf: NodeId) -> &Tensor<T> {
        &self.grads[&leaf]
    }
}

#[derive(Debug, Clone, Default)]
pub struct ExprGraph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> ExprGraph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn op(&self, id: NodeId) -> Op<T> {
        self.nodes[id.0].op
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, parents: &[NodeId]) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("graph node {op:?}")));
        }
        let needs_grad = match op {
            Op::Leaf { differentiable } => differentiable,
            _ => parents.iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.push(Op::Leaf { differentiable: true }, value, &[])
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.push(Op::Leaf { differentiable: false }, value, &[])
    }

    pub fn affine(&mut self, w: NodeId, v: NodeId, b: NodeId) -> Result<NodeId> {
        let value = eval_affine(self.value(w), self.value(v), self.value(b))?;
        self.push(Op::Affine { w, v, b }, value, &[w, v, b])
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).map(|v| v.tanh());
        self.push(Op::Tanh(a), value, &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).map(|v| v.max(T::zero()));
        self.push(Op::Relu(a), value, &[a])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        self.push(Op::Add(a, b), value, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).sub(self.value(b))?;
        self.push(Op::Sub(a, b), value, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(Op::Mul(a, b), value, &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> Result<NodeId> {
        let value = self.value(a).scale(s);
        self.push(Op::Scale(a, s), value, &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), value, &[a])
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let value = eval_softmax(self.value(a))?;
        self.push(Op::Softmax(a), value, &[a])
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let value = eval_log_softmax(self.value(a))?;
        self.push(Op::LogSoftmax(a), value, &[a])
    }

    pub fn pick(&mut self, a: NodeId, index: usize) -> Result<NodeId> {
        let src = self.value(a);
        if !src.is_vector() {
            return Err(dim_err("pick", "a", src.shape(), "rank 1"));
        }
        if index >= src.len() {
            return Err(Error::Index {
                context: "pick",
                index,
                len: src.len(),
            });
        }
        let value = Tensor::scalar(src.data()[index]);
        self.push(Op::Pick(a, index), value, &[a])
    }

    /// `(1 − λ)·a + λ·b`; returns `b` itself when `λ == 1`.
    pub fn lerp(&mut self, a: NodeId, b: NodeId, lambda: T) -> Result<NodeId> {
        if lambda == T::one() {
            return Ok(b);
        }
        let sa = self.scale(a, T::one() - lambda)?;
        let sb = self.scale(b, lambda)?;
        self.add(sa, sb)
    }

    /// Prediction entropy `−Σ p log p` of `softmax(logits)`.
    pub fn entropy(&mut self, logits: NodeId) -> Result<NodeId> {
        let p = self.softmax(logits)?;
        let lp = self.log_softmax(logits)?;
        let plp = self.mul(p, lp)?;
        let s = self.sum(plp)?;
        self.scale(s, -T::one())
    }

    /// Softmax cross-entropy against an integer label.
    pub fn cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let lp = self.log_softmax(logits)?;
        let picked = self.pick(lp, label)?;
        self.scale(picked, -T::one())
    }

    /// `KL(softmax(p) ‖ softmax(q))`.
    pub fn kl(&mut self, p_logits: NodeId, q_logits: NodeId) -> Result<NodeId> {
        let p = self.softmax(p_logits)?;
        let lp = self.log_softmax(p_logits)?;
        let lq = self.log_softmax(q_logits)?;
        let diff = self.sub(lp, lq)?;
        let prod = self.mul(p, diff)?;
        self.sum(prod)
    }

    /// Mean of scalar nodes.
    pub fn mean(&mut self, items: &[NodeId]) -> Result<NodeId> {
        let (&first, rest) = items
            .split_first()
            .ok_or_else(|| Error::Contract("mean of zero nodes".into()))?;
        let mut acc = first;
        for &n in rest {
            acc = self.add(acc, n)?;
        }
        self.scale(acc, T::one() / T::from_usize_lossy(items.len()))
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

/// Reverse-mode gradients of the scalar node `output` with respect to every
/// differentiable leaf of `graph`.
pub fn reverse_grad<T: Scalar>(graph: &ExprGraph<T>, output: NodeId) -> Result<GradResult<T>> {
    let out = graph.value(output);
    if !out.is_scalar() {
        return Err(Error::Contract(format!(
            "reverse_grad output must be scalar, got shape {:?}",
            out.shape()
        )));
    }
    let nodes = &graph.nodes;
    let mut adj: Vec<Option<Tensor<T>>> = vec![None; output.0 + 1];
    adj[output.0] = Some(Tensor::filled(out.shape(), T::one()));

    for i in (0..=output.0).rev() {
        let node = &nodes[i];
        if !node.needs_grad {
            continue;
        }
        let Some(g) = adj[i].take() else { continue };
        let wants = |id: NodeId| nodes[id.0].needs_grad;
        match node.op {
            Op::Leaf { .. } => {
                adj[i] = Some(g);
            }
            Op::Affine { w, v, b } => {
                if wants(w) {
                    accumulate(&mut adj[w.0], Tensor::outer(&g, &nodes[v.0].value));
                }
                if wants(v) {
                    accumulate(&mut adj[v.0], nodes[w.0].value.matvec_t(&g)?);
                }
                if wants(b) {
                    accumulate(&mut adj[b.0], g);
                }
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let da = g.zip_map(y, |gi, yi| gi * (T::one() - yi * yi))?;
                accumulate(&mut adj[a.0], da);
            }
            Op::Relu(a) => {
                let x = &nodes[a.0].value;
                let da = g.zip_map(x, |gi, xi| if xi > T::zero() { gi } else { T::zero() })?;
                accumulate(&mut adj[a.0], da);
            }
            Op::Add(a, b) => {
                if wants(a) {
                    accumulate(&mut adj[a.0], g.clone());
                }
                if wants(b) {
                    accumulate(&mut adj[b.0], g);
                }
            }
            Op::Sub(a, b) => {
                if wants(b) {
                    accumulate(&mut adj[b.0], g.map(|v| -v));
                }
                if wants(a) {
                    accumulate(&mut adj[a.0], g);
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    accumulate(&mut adj[a.0], g.zip_map(&nodes[b.0].value, |x, y| x * y)?);
                }
                if wants(b) {
                    accumulate(&mut adj[b.0], g.zip_map(&nodes[a.0].value, |x, y| x * y)?);
                }
            }
            Op::Scale(a, s) => accumulate(&mut adj[a.0], g.scale(s)),
            Op::Sum(a) => {
                let src = &nodes[a.0].value;
                accumulate(&mut adj[a.0], Tensor::filled(src.shape(), g.item()));
            }
            Op::Softmax(a) => {
                let p = &node.value;
                let gp = g.dot(p);
                accumulate(&mut adj[a.0], g.zip_map(p, |gi, pi| pi * (gi - gp))?);
            }
            Op::LogSoftmax(a) => {
                let total = g.sum();
                let p = node.value.map(|v| v.exp());
                accumulate(&mut adj[a.0], g.zip_map(&p, |gi, pi| gi - pi * total)?);
            }
            Op::Pick(a, index) => {
                let mut da = Tensor::zeros(nodes[a.0].value.shape());
                da.data_mut()[index] = g.item();
                accumulate(&mut adj[a.0], da);
            }
        }
    }

    let mut grads = BTreeMap::new();
    for (i, node) in nodes.iter().enumerate() {
        if let Op::Leaf { differentiable: true } = node.op {
            let g = if i <= output.0 {
                adj[i].take()
            } else {
                None
            };
            let g = g.unwrap_or_else(|| Tensor::zeros(node.value.shape()));
            grads.insert(NodeId(i), g.ensure_finite("gradient")?);
        }
    }
    Ok(GradResult {
        value: out.clone(),
        grads,
    })
}
