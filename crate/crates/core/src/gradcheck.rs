//! Central finite-difference gradient oracle.
//!
//! The numeric side only ever evaluates a forward closure, so it stays
//! independent of the backward implementation it is used to check.

use crate::tensor::Tensor;

/// Numeric gradient of `f` at `inputs` by central differences with step `h`,
/// one output tensor of derivatives per input tensor.
pub fn numeric_gradient(
    mut f: impl FnMut(&[Tensor]) -> f64,
    inputs: &[Tensor],
    h: f64,
) -> Vec<Tensor> {
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for ti in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[ti].shape().to_vec());
        for ei in 0..inputs[ti].len() {
            let orig = work[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + h;
            let up = f(&work);
            work[ti].data_mut()[ei] = orig - h;
            let down = f(&work);
            work[ti].data_mut()[ei] = orig;
            g.data_mut()[ei] = (up - down) / (2.0 * h);
        }
        grads.push(g);
    }
    grads
}

/// Largest relative discrepancy between analytic and numeric derivatives.
/// The denominator is floored so near-zero gradients are compared on an
/// absolute scale.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
        .fold(0.0, f64::max)
}
