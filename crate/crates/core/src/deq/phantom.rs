//! Unrolled ("phantom") gradients: the solver output is treated as a
//! constant and a short differentiable tail of layer applications is
//! appended before the loss.

use crate::autodiff::{reverse_grad, ExprGraph, GradResult, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::model::{DeqModel, ModelGrads, ModelNodes};
use super::solver::DynamicsTrace;

/// Loss applied to the logits at the end of the unrolled tail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TailLoss {
    CrossEntropy,
    /// `−logits[label]`; softmax-free, used to probe reachability.
    NegLogit,
}

#[derive(Debug, Clone)]
pub struct PhantomGrad<T> {
    pub result: GradResult<T>,
    pub nodes: ModelNodes,
    pub input: NodeId,
}

impl<T: Scalar> PhantomGrad<T> {
    pub fn loss(&self) -> T {
        self.result.value.item()
    }

    pub fn params(&self) -> ModelGrads<T> {
        ModelGrads::from_result(&self.result, &self.nodes)
    }

    pub fn input_grad(&self) -> &Tensor<T> {
        self.result.grad(self.input)
    }
}

/// Gradient of the loss at `k_p` undamped layer applications past
/// `trace.states[loss_at]`, for all parameters and the input.
pub fn phantom_grad<T: Scalar>(
    model: &DeqModel<T>,
    trace: &DynamicsTrace<T>,
    x: &Tensor<T>,
    loss_at: usize,
    label: usize,
    k_p: usize,
) -> Result<PhantomGrad<T>> {
    let n = trace.iterations();
    if loss_at < 1 || loss_at > n {
        return Err(Error::Index {
            context: "phantom_grad loss_at",
            index: loss_at,
            len: n + 1,
        });
    }
    phantom_grad_from(model, &trace.states[loss_at], x, label, k_p, TailLoss::CrossEntropy)
}

pub fn phantom_grad_from<T: Scalar>(
    model: &DeqModel<T>,
    anchor: &Tensor<T>,
    x: &Tensor<T>,
    label: usize,
    k_p: usize,
    loss: TailLoss,
) -> Result<PhantomGrad<T>> {
    if k_p < 1 {
        return Err(Error::Contract("phantom unroll needs at least one step".into()));
    }
    if label >= model.classes() {
        return Err(Error::Index {
            context: "phantom_grad label",
            index: label,
            len: model.classes(),
        });
    }
    let mut g = ExprGraph::new();
    let nodes = model.to_graph(&mut g, true)?;
    let input = g.param(x.clone())?;
    let z0 = g.constant(anchor.clone())?;
    let z = nodes.unroll(&mut g, z0, input, k_p, T::one())?;
    let logits = nodes.head(&mut g, z)?;
    let out = match loss {
        TailLoss::CrossEntropy => g.cross_entropy(logits, label)?,
        TailLoss::NegLogit => {
            let p = g.pick(logits, label)?;
            g.scale(p, -T::one())?
        }
    };
    let result = reverse_grad(&g, out)?;
    Ok(PhantomGrad {
        result,
        nodes,
        input,
    })
}
