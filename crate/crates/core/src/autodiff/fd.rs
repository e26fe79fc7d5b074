use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Tensor;

/// Central finite differences `(f(x + h·e_k) − f(x − h·e_k)) / 2h` per coordinate.
pub fn finite_diff_grad<T, F>(f: F, x: &Tensor<T>, h: T) -> Result<Tensor<T>>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Result<T>,
{
    if !(h > T::zero()) {
        return Err(Error::Contract("finite difference step must be positive".into()));
    }
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for k in 0..x.len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[k] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[k] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!("finite difference probe {k}")));
        }
        grad.data_mut()[k] = (fp - fm) / (h + h);
    }
    Ok(grad)
}

/// `max_k |a_k − b_k| / max(max_k |a_k|, max_k |b_k|, floor)`.
///
/// Used for every gradient comparison in the test suites; the floor keeps
/// gradients that vanish up to rounding from producing spurious ratios.
pub fn max_rel_error<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, floor: T) -> T {
    let num = a.linf_dist(b);
    num / b.max_abs().max(a.max_abs()).max(floor)
}
