//! Finite-difference gradient checking.

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Per-parameter comparison of autodiff against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error for each parameter, in input order.
    pub max_rel_error: Vec<f64>,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }
}

/// Relative errors below this magnitude are measured against it instead.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn evaluate<F>(f: &F, params: &[Tensor<f64>], trainable: bool) -> Result<(Graph<f64>, Var)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone(), trainable)).collect();
    let loss = f(&mut g, &vars)?;
    Ok((g, loss))
}

/// Reverse-mode gradients of the scalar built by `f` with respect to `params`.
pub fn analytic_gradients<F>(f: &F, params: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let (mut g, loss) = evaluate(f, params, true)?;
    let grads = g.backward(loss)?;
    Ok(grads.params())
}

/// Central differences `(f(p + ε) − f(p − ε)) / 2ε` for every element.
pub fn numeric_gradients<F>(f: &F, params: &[Tensor<f64>], eps: f64) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut grad = vec![0.0; params[pi].len()];
        for (ei, slot) in grad.iter_mut().enumerate() {
            let orig = params[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + eps;
            let (g, l) = evaluate(f, &work, false)?;
            let plus = g.value(l).item()?;
            work[pi].data_mut()[ei] = orig - eps;
            let (g, l) = evaluate(f, &work, false)?;
            let minus = g.value(l).item()?;
            work[pi].data_mut()[ei] = orig;
            *slot = (plus - minus) / (2.0 * eps);
        }
        out.push(Tensor::new(params[pi].shape().to_vec(), grad)?);
    }
    Ok(out)
}

/// Compares two gradient sets elementwise with [`relative_error`].
pub fn compare(analytic: &[Tensor<f64>], numeric: &[Tensor<f64>], tolerance: f64) -> GradCheckReport {
    let max_rel_error: Vec<f64> = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| a.data().iter().zip(n.data()).map(|(&a, &n)| relative_error(a, n)).fold(0.0, f64::max))
        .collect();
    let pass = analytic.len() == numeric.len() && max_rel_error.iter().all(|&e| e <= tolerance);
    GradCheckReport { max_rel_error, tolerance, pass }
}

/// Checks reverse-mode gradients of `f` against central differences.
///
/// `f` receives one graph variable per entry of `params` and must return a
/// scalar. It is called once with trainable leaves and `2 × elements` more
/// times with constants, so keep the problem small.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], eps: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(&f, params)?;
    let numeric = numeric_gradients(&f, params, eps)?;
    Ok(compare(&analytic, &numeric, tolerance))
}
