use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of a scalar function of one tensor with
/// central differences; returns the largest
/// `|analytic - numeric| / max(1, |numeric|)` over all components.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(x), step)
}

/// [`grad_check`] over several input tensors at once.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], step: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&g, &vars)?;
        let v = scalar_of(&out.value())?;
        Ok(v)
    };

    let g = Graph::new();
    let vars: Vec<Var<'_>> = xs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&g, &vars)?;
    scalar_of(&out.value())?;
    let grads = g.backward(out);

    let mut worst: f64 = 0.0;
    let mut probe: Vec<Tensor> = xs.to_vec();
    for (ti, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var).expect("params require grad").clone();
        for i in 0..xs[ti].len() {
            let orig = xs[ti].data()[i];
            probe[ti].data_mut()[i] = orig + step;
            let plus = eval(&probe)?;
            probe[ti].data_mut()[i] = orig - step;
            let minus = eval(&probe)?;
            probe[ti].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[i];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient at input {ti}, component {i}"
                )));
            }
            worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    Ok(worst)
}

fn scalar_of(t: &Tensor) -> Result<f64> {
    let v = t.item()?;
    if !v.is_finite() {
        return Err(Error::Numeric(format!("function value {v} is not finite")));
    }
    Ok(v)
}
