//! Central finite differences, used as the independent oracle for every
//! analytic gradient in the crate.

use super::Tensor;
use crate::error::{Error, Result};

/// Central-difference gradient of `f` with respect to every entry of
/// `params`. Entries are perturbed in place and restored before returning.
pub fn finite_diff_grad<F>(mut f: F, params: &mut [Tensor], step: f64) -> Result<Vec<Tensor>>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {step}")));
    }
    let mut grads: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    for t in 0..params.len() {
        for i in 0..params[t].numel() {
            let original = params[t].data()[i];
            params[t].data_mut()[i] = original + step;
            let plus = f(params);
            params[t].data_mut()[i] = original - step;
            let minus = f(params);
            params[t].data_mut()[i] = original;
            let (plus, minus) = (plus?, minus?);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!(
                    "objective not finite while perturbing tensor {t} entry {i}"
                )));
            }
            grads[t].data_mut()[i] = (plus - minus) / (2.0 * step);
        }
    }
    Ok(grads)
}

/// `max|a − b| / max(max|a|, max|b|)`: the worst coordinate error relative to
/// the scale of the larger tensor. Zero when both are identically zero.
pub fn max_relative_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_relative_error on mismatched shapes");
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let scale = a
        .data()
        .iter()
        .chain(b.data())
        .map(|v| v.abs())
        .fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let mut p = vec![Tensor::scalar(3.0)];
        let g = finite_diff_grad(|p| Ok(p[0].item()?.powi(2)), &mut p, 1e-5).unwrap();
        assert!((g[0].item().unwrap() - 6.0).abs() < 1e-8);
        assert_eq!(p[0].item().unwrap(), 3.0);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let mut p = vec![Tensor::vector(vec![1.0, -4.0, 2.5]).unwrap()];
        let g = finite_diff_grad(|_| Ok(7.0), &mut p, 1e-5).unwrap();
        assert!(g[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_objective_is_reported() {
        let mut p = vec![Tensor::scalar(0.0)];
        let r = finite_diff_grad(|p| Ok(p[0].item()?.ln()), &mut p, 1e-3);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn rejects_non_positive_step() {
        let mut p = vec![Tensor::scalar(0.0)];
        assert!(finite_diff_grad(|_| Ok(0.0), &mut p, 0.0).is_err());
    }
}
