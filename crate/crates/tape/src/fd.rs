//! Central finite differences for verifying backward passes.

use ndarray::Array2;

use crate::Scalar;

/// Central-difference estimate of dL/dx at one coordinate of one input.
///
/// `eval` rebuilds the graph from the perturbed inputs and returns the scalar
/// loss; `inputs` are the leaf values, `which` selects the input, `(i, j)` the
/// coordinate, `h` the step.
pub fn central_diff<S, F>(
    eval: &F,
    inputs: &[Array2<S>],
    which: usize,
    i: usize,
    j: usize,
    h: S,
) -> S
where
    S: Scalar,
    F: Fn(&[Array2<S>]) -> S,
{
    let mut plus = inputs.to_vec();
    plus[which][(i, j)] = plus[which][(i, j)] + h;
    let mut minus = inputs.to_vec();
    minus[which][(i, j)] = minus[which][(i, j)] - h;
    let two = S::from_f64(2.0);
    (eval(&plus) - eval(&minus)) / (two * h)
}

/// Relative error between analytic and numeric gradients with an absolute
/// floor of 1, so tiny gradients compare absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}
