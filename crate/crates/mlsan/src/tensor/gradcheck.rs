//! Central finite-difference gradient verification.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Compares the analytic gradient of `f` against central differences for
/// every scalar in `params` and returns the worst relative error.
///
/// `f` must rebuild its graph on every call and return a scalar loss.
/// Non-determinism is detected by evaluating `f` twice up front and
/// requiring bit-identical values. Relative error falls back to absolute
/// error when both gradients are below 1e-8 in magnitude.
pub fn finite_difference_check<F>(f: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn() -> Result<Tensor>,
{
    if step <= 0.0 {
        return Err(Error::Config(format!("step must be positive, got {step}")));
    }
    let v1 = f()?.value();
    let v2 = f()?.value();
    if v1.to_bits() != v2.to_bits() {
        return Err(Error::Determinism(format!(
            "two evaluations differ: {v1} vs {v2}"
        )));
    }

    for t in params {
        t.zero_grad();
    }
    let loss = f()?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let mut worst = 0.0_f64;
    for (tensor, grads) in params.iter().zip(&analytic) {
        for i in 0..tensor.len() {
            let orig = tensor.get(i);
            tensor.set(i, orig + step);
            let plus = f()?.value();
            tensor.set(i, orig - step);
            let minus = f()?.value();
            tensor.set(i, orig);
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(grad_error(grads[i], numeric));
        }
    }
    Ok(worst)
}

/// Relative error between analytic and numeric gradients, with an
/// absolute-error fallback for near-zero pairs.
pub fn grad_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    let mag = analytic.abs().max(numeric.abs());
    if mag < 1e-8 {
        diff
    } else {
        diff / mag
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_matches() {
        let theta = Tensor::param(vec![1], vec![3.0]).unwrap();
        let err = finite_difference_check(
            || Ok(theta.mul(&theta)?.sum()),
            std::slice::from_ref(&theta),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "error {err}");
    }

    #[test]
    fn constant_function_zero_error() {
        let theta = Tensor::param(vec![2], vec![1.0, 2.0]).unwrap();
        let err = finite_difference_check(
            || Ok(Tensor::scalar(7.0).scale(1.0)),
            std::slice::from_ref(&theta),
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn nonpositive_step_rejected() {
        let theta = Tensor::param(vec![1], vec![1.0]).unwrap();
        assert!(
            finite_difference_check(|| Ok(theta.sum()), std::slice::from_ref(&theta), 0.0).is_err()
        );
    }

    #[test]
    fn sigmoid_gradient_at_1_2() {
        let x = Tensor::param(vec![1], vec![1.2]).unwrap();
        let err =
            finite_difference_check(|| Ok(x.sigmoid().sum()), std::slice::from_ref(&x), 1e-5)
                .unwrap();
        assert!(err < 1e-8, "error {err}");
    }
}
