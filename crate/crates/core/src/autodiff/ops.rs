//! Eager evaluation of the primitives that the expression graph records.
//!
//! The graph computes its forward values with these same functions, so a
//! graph value and the corresponding eager call agree bitwise.

use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;

use super::Tensor;

/// `W·v + b`.
pub fn eval_affine<T: Scalar>(w: &Tensor<T>, v: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if !w.is_matrix() {
        return Err(dim_err("affine", "W", w.shape(), "rank 2"));
    }
    let (m, n) = (w.rows(), w.cols());
    if v.shape() != [n] {
        return Err(dim_err("affine", "v", v.shape(), format!("[{n}]")));
    }
    if b.shape() != [m] {
        return Err(dim_err("affine", "b", b.shape(), format!("[{m}]")));
    }
    let wv = w.matvec(v)?;
    let mut out = wv;
    for (o, &bi) in out.data_mut().iter_mut().zip(b.data()) {
        *o += bi;
    }
    out.ensure_finite("affine")
}

fn check_logits<T: Scalar>(logits: &Tensor<T>, op: &'static str) -> Result<()> {
    if !logits.is_vector() || logits.len() < 2 {
        return Err(dim_err(op, "logits", logits.shape(), "[C] with C >= 2"));
    }
    if !logits.all_finite() {
        return Err(Error::NonFinite(op.to_string()));
    }
    Ok(())
}

fn log_sum_exp<T: Scalar>(x: &[T]) -> (T, T) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = x.iter().map(|&v| (v - max).exp()).sum();
    (max, max + s.ln())
}

/// Numerically stable softmax (max-subtracted).
pub fn eval_softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    check_logits(logits, "softmax")?;
    let (max, _) = log_sum_exp(logits.data());
    let e = logits.map(|v| (v - max).exp());
    let s = e.sum();
    Ok(e.map(|v| v / s))
}

pub fn eval_log_softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    check_logits(logits, "log_softmax")?;
    let (_, lse) = log_sum_exp(logits.data());
    Ok(logits.map(|v| v - lse))
}

/// Shannon entropy (natural log) of `softmax(logits)`; `0·log 0 = 0`.
pub fn eval_pred_entropy<T: Scalar>(logits: &Tensor<T>) -> Result<T> {
    let p = eval_softmax(logits)?;
    let lp = eval_log_softmax(logits)?;
    let h = -p
        .data()
        .iter()
        .zip(lp.data())
        .map(|(&pi, &lpi)| if pi == T::zero() { T::zero() } else { pi * lpi })
        .sum::<T>();
    // Rounding can leave a tiny negative value for one-hot predictions.
    Ok(h.max(T::zero()))
}

/// `−log softmax(logits)[label]`.
pub fn eval_cross_entropy<T: Scalar>(logits: &Tensor<T>, label: usize) -> Result<T> {
    check_logits(logits, "cross_entropy")?;
    if label >= logits.len() {
        return Err(Error::Index {
            context: "cross_entropy label",
            index: label,
            len: logits.len(),
        });
    }
    let lp = eval_log_softmax(logits)?;
    Ok(-lp.data()[label])
}

/// `KL(softmax(p) ‖ softmax(q))` from two logit vectors.
pub fn eval_kl<T: Scalar>(p_logits: &Tensor<T>, q_logits: &Tensor<T>) -> Result<T> {
    let p = eval_softmax(p_logits)?;
    let lp = eval_log_softmax(p_logits)?;
    let lq = eval_log_softmax(q_logits)?;
    if lq.len() != lp.len() {
        return Err(dim_err("kl", "q", q_logits.shape(), format!("[{}]", lp.len())));
    }
    Ok(p.data()
        .iter()
        .zip(lp.data().iter().zip(lq.data()))
        .map(|(&pi, (&a, &b))| pi * (a - b))
        .sum())
}
