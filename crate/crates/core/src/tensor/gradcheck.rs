//! Central-difference gradient checking.
//!
//! `finite_diff_grad` probes a scalar loss one coordinate at a time with
//! symmetric steps, giving an O(h²) estimate that is exact for quadratics
//! up to rounding. It exists to referee the hand-derived backward passes:
//! every analytic gradient in this crate is compared against it in tests.

use super::{Scalar, Tensor};
use crate::{Error, Result};
use alloc::format;

/// Numerical gradient of `f` at `x` by central differences with step `h`.
///
/// `f` is called twice per element of `x`, so this is strictly a test and
/// debugging tool. Non-finite loss values are reported as numeric errors
/// with the offending coordinate.
pub fn finite_diff_grad<T, F>(mut f: F, x: &Tensor<T>, h: T) -> Result<Tensor<T>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<T>,
{
    if !(h > T::zero()) {
        return Err(Error::Argument {
            context: "finite_diff_grad",
            message: format!("step must be positive, got {h:?}"),
        });
    }
    let mut probe = x.clone();
    let mut grad = x.zeros_like();
    for i in 0..probe.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let f_plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let f_minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !f_plus.is_finite() || !f_minus.is_finite() {
            return Err(Error::Numeric {
                context: format!("finite_diff_grad: non-finite loss at coordinate {i}"),
            });
        }
        grad.data_mut()[i] = (f_plus - f_minus) / (h + h);
    }
    Ok(grad)
}

/// Largest elementwise relative error between an analytic and a numeric
/// gradient: `max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)`. The floor
/// keeps near-zero coordinates from dominating with rounding noise.
pub fn max_relative_error<T: Scalar>(
    analytic: &Tensor<T>,
    numeric: &Tensor<T>,
    floor: T,
) -> Result<T> {
    if analytic.shape() != numeric.shape() {
        return Err(Error::Shape {
            context: "max_relative_error",
            expected: analytic.shape().to_vec(),
            got: numeric.shape().to_vec(),
        });
    }
    let mut worst = T::zero();
    for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
        let scale = a.abs().max(n.abs()).max(floor);
        let err = (a - n).abs() / scale;
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}
