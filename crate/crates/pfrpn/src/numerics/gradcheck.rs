//! Central finite-difference gradient checking.
//!
//! The verification oracle for every differentiable path in the crate: any
//! analytic gradient produced by the tape must agree with
//! (f(x+h) − f(x−h)) / 2h coordinate-wise.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Maximum relative gradient error of `analytic` against central finite
/// differences of `f` at `point`, over the given coordinates.
///
/// The per-coordinate error is |analytic_i − numeric_i| / max(1, |analytic_i|).
/// A non-finite evaluation of `f` is an error naming the coordinate.
pub fn finite_difference_check_coords<F>(
    f: F,
    analytic: &Tensor,
    point: &Tensor,
    h: f64,
    coords: &[usize],
) -> Result<f64>
where
    F: Fn(&Tensor) -> f64,
{
    assert_eq!(
        analytic.numel(),
        point.numel(),
        "analytic gradient and point must have equal element counts"
    );
    let mut max_err: f64 = 0.0;
    let mut probe = point.clone();
    for &i in coords {
        assert!(i < point.numel(), "coordinate {i} out of range");
        let x = point.data[i];

        probe.data[i] = x + h;
        let fp = f(&probe);
        probe.data[i] = x - h;
        let fm = f(&probe);
        probe.data[i] = x;

        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "non-finite function value near coordinate {i} (f+ = {fp}, f- = {fm})"
            )));
        }
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.data[i];
        let err = (a - numeric).abs() / a.abs().max(1.0);
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}

/// `finite_difference_check_coords` over every coordinate of `point`.
pub fn finite_difference_check<F>(f: F, analytic: &Tensor, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> f64,
{
    let all: Vec<usize> = (0..point.numel()).collect();
    finite_difference_check_coords(f, analytic, point, h, &all)
}
