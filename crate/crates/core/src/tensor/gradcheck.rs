//! Central finite-difference gradient checking.

use crate::error::Result;

use super::{Graph, Tensor, Var};

/// Max over coordinates of `|analytic − numeric| / max(1, |analytic|)`
/// for a scalar function of one tensor. A non-finite function value or
/// gradient yields `f64::INFINITY`.
pub fn finite_difference_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let errs = grad_check_inputs(|g, vars| f(g, vars[0]), std::slice::from_ref(x), eps)?;
    Ok(errs[0])
}

/// Checks every input of a scalar function of several tensors. Returns
/// one max-relative-error per input.
pub fn grad_check_inputs<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.value(out).item().is_finite() {
        return Ok(vec![f64::INFINITY; inputs.len()]);
    }
    g.backward(out)?;

    let mut work = inputs.to_vec();
    let mut errors = Vec::with_capacity(inputs.len());
    for (k, var) in vars.iter().enumerate() {
        let numel = inputs[k].numel();
        let analytic = g
            .grad(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; numel]);
        let mut worst = 0.0f64;
        for i in 0..numel {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[i];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            if !err.is_finite() {
                worst = f64::INFINITY;
                break;
            }
            worst = worst.max(err);
        }
        errors.push(worst);
    }
    Ok(errors)
}
