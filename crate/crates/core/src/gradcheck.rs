//! Finite-difference verification helpers.
//!
//! Every analytic gradient in this crate is checked against central
//! differences; these utilities keep the comparisons uniform.

use crate::{real, Scalar};

/// Central difference `(f(x+h) − f(x−h)) / 2h` of a scalar probe.
pub fn central_difference<T: Scalar>(mut f: impl FnMut(T) -> T, x: T, step: T) -> T {
    let two = real::<T>(2.0);
    (f(x + step) - f(x - step)) / (two * step)
}

/// Relative error with an absolute floor so near-zero pairs do not blow up:
/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error<T: Scalar>(a: T, b: T, floor: T) -> T {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Check one analytic partial against a central difference.
///
/// `loss_at` evaluates the scalar objective with the probed coordinate set
/// to the given value; `analytic` is the gradient entry under test.
pub fn check_partial<T: Scalar>(
    loss_at: impl FnMut(T) -> T,
    x: T,
    analytic: T,
    step: T,
    tol: T,
) -> Result<T, String> {
    let fd = central_difference(loss_at, x, step);
    let err = relative_error(analytic, fd, real::<T>(1e-8));
    if err < tol {
        Ok(err)
    } else {
        Err(format!(
            "gradient mismatch: analytic {analytic} vs central difference {fd} (rel err {err})"
        ))
    }
}
