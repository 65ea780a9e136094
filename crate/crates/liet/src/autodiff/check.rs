//! Finite-difference gradient verification.
//!
//! Used by the test suites to validate every analytic backward pass against
//! central differences, typically in `f64` with a step of `1e-5`.

use ndarray::ArrayD;

use crate::num::Scalar;

/// Central-difference gradient of `f` with respect to every element of
/// every input: `(f(x + h) - f(x - h)) / (2h)`.
pub fn central_difference<T, F>(mut f: F, inputs: &[ArrayD<T>], step: T) -> Vec<ArrayD<T>>
where
    T: Scalar,
    F: FnMut(&[ArrayD<T>]) -> T,
{
    let two = T::of_f64(2.0);
    let mut work: Vec<ArrayD<T>> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grad = ArrayD::<T>::zeros(inputs[i].raw_dim());
        for idx in 0..inputs[i].len() {
            let orig = inputs[i].as_slice().expect("standard layout")[idx];
            work[i].as_slice_mut().unwrap()[idx] = orig + step;
            let plus = f(&work);
            work[i].as_slice_mut().unwrap()[idx] = orig - step;
            let minus = f(&work);
            work[i].as_slice_mut().unwrap()[idx] = orig;
            grad.as_slice_mut().unwrap()[idx] = (plus - minus) / (two * step);
        }
        grads.push(grad);
    }
    grads
}

/// Largest relative error between analytic and numeric gradients, ignoring
/// entries where both are below `threshold` (finite differences are noise
/// there).
pub fn max_relative_error<T: Scalar>(
    analytic: &ArrayD<T>,
    numeric: &ArrayD<T>,
    threshold: T,
) -> T {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shape mismatch");
    let mut worst = T::zero();
    for (&a, &n) in analytic.iter().zip(numeric.iter()) {
        let scale = a.abs().max(n.abs());
        if scale <= threshold {
            continue;
        }
        let rel = (a - n).abs() / scale;
        if rel > worst {
            worst = rel;
        }
    }
    worst
}
