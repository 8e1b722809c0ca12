//! Central finite-difference verification of tape gradients.

use super::{Graph, Tensor, Var};
use crate::error::{Result, SecaError};

/// Magnitudes below this are compared absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max relative error per parameter, in argument order.
    pub per_param: Vec<f64>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Compares analytic gradients of `loss` at `point` against central
/// differences with the given step.
///
/// `loss` receives a fresh graph and one trainable leaf per entry of
/// `point`, and must return a scalar node.
pub fn grad_check<F>(point: &[Tensor], loss: F, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars = values
            .iter()
            .map(|t| g.param(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = loss(&mut g, &vars)?;
        let v = g.scalar(out);
        if !v.is_finite() {
            return Err(SecaError::NonFinite("grad_check loss".into()));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let vars = point
        .iter()
        .map(|t| g.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = loss(&mut g, &vars)?;
    if !g.scalar(out).is_finite() {
        return Err(SecaError::NonFinite("grad_check loss".into()));
    }
    let grads = g.backward(out)?;

    let mut per_param = Vec::with_capacity(point.len());
    let mut values: Vec<Tensor> = point.to_vec();
    for (p, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        let mut worst: f64 = 0.0;
        for i in 0..values[p].len() {
            let orig = values[p].data()[i];
            values[p].data_mut()[i] = orig + step;
            let up = eval(&values)?;
            values[p].data_mut()[i] = orig - step;
            let down = eval(&values)?;
            values[p].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[i];
            let denom = a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
        per_param.push(worst);
    }
    let max_rel_error = per_param.iter().cloned().fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel_error <= tol,
        per_param,
        max_rel_error,
        tol,
    })
}
