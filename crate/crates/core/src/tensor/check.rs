//! Central finite-difference gradient oracle.
//!
//! Every backward rule in this crate is validated against two-sided finite
//! differences. The oracle rebuilds the graph from perturbed copies of the
//! leaves, so `f` must be a pure function of the given inputs.

use crate::error::{Error, Result};

use super::{Element, Tensor};

/// Default centered-difference step.
pub const DEFAULT_FD_EPS: f64 = 1e-5;

/// Compare analytic gradients of a scalar-valued graph against centered
/// finite differences, returning the worst relative error over every
/// element of every input.
///
/// `inputs` must be gradient-tracking leaves and `f` must return a scalar
/// built from (copies of) exactly those leaves. Relative error uses
/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn finite_diff_check<E, F>(f: F, inputs: &[Tensor<E>], eps: f64) -> Result<f64>
where
    E: Element,
    F: Fn(&[Tensor<E>]) -> Result<Tensor<E>>,
{
    if eps <= 0.0 {
        return Err(Error::numeric(format!("finite_diff_check: eps must be positive, got {eps}")));
    }
    for (i, t) in inputs.iter().enumerate() {
        if !t.tracks_grad() {
            return Err(Error::numeric(format!(
                "finite_diff_check: input {i} does not track gradients"
            )));
        }
        t.clear_grad();
    }

    let out = f(inputs)?;
    if out.len() != 1 {
        return Err(Error::shape(format!(
            "finite_diff_check: f must return a scalar, got shape {:?}",
            out.shape()
        )));
    }
    out.backward()?;
    let analytic: Vec<Vec<E>> = inputs
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![E::zero(); t.len()]))
        .collect();

    let eval = |tensors: &[Tensor<E>]| -> Result<f64> {
        let out = f(tensors)?;
        if out.len() != 1 {
            return Err(Error::shape("finite_diff_check: f output became non-scalar".to_string()));
        }
        Ok(out.item().to_f64())
    };

    let mut worst = 0.0f64;
    for (ti, t) in inputs.iter().enumerate() {
        for ei in 0..t.len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            let mut d = t.to_vec();
            let orig = d[ei];
            d[ei] = orig + E::from_f64(eps);
            plus[ti] = Tensor::param(d.clone(), t.shape())?;
            d[ei] = orig - E::from_f64(eps);
            minus[ti] = Tensor::param(d, t.shape())?;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
            let a = analytic[ti][ei].to_f64();
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}
