//! Central finite-difference gradient checking for any scalar function
//! built on a [`Graph`]. Shipped as library code so custom losses can be
//! re-verified the same way the built-in ones are.

use crate::autodiff::{Graph, Var};
use crate::error::{PalError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst per-input `|analytic - numeric| / max(|analytic|, |numeric|)`,
    /// with norms taken over each input tensor.
    pub max_rel_error: f64,
    /// Worst per-element absolute difference.
    pub max_abs_error: f64,
    pub evaluations: usize,
}

/// Compares analytic gradients against central differences with step `h`.
///
/// `build` receives a fresh graph and one leaf per input and must return a
/// scalar. Inputs that do not require gradients are held fixed.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor]| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.input(t)).collect();
        let root = build(&mut g, &vars)?;
        Ok((g, vars, root))
    };

    let (g, vars, root) = eval(inputs)?;
    let grads = g.backward(root)?;
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, max_abs_error: 0.0, evaluations: 1 };

    for (ti, input) in inputs.iter().enumerate() {
        if !input.requires_grad() {
            continue;
        }
        let analytic = grads.get(vars[ti]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; input.len()]);
        let mut numeric = vec![0.0; input.len()];
        #[allow(clippy::needless_range_loop)]
        for k in 0..input.len() {
            let orig = input.values()[k];
            work[ti].values_mut()[k] = orig + h;
            let (gp, _, rp) = eval(&work)?;
            work[ti].values_mut()[k] = orig - h;
            let (gm, _, rm) = eval(&work)?;
            work[ti].values_mut()[k] = orig;
            numeric[k] = (gp.scalar(rp) - gm.scalar(rm)) / (2.0 * h);
            report.evaluations += 2;
        }
        if numeric.iter().any(|x| !x.is_finite()) {
            return Err(PalError::Domain(format!("non-finite finite difference for input {ti}")));
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let scale = na.max(nn);
        let rel = if scale > 0.0 { diff / scale } else { 0.0 };
        report.max_rel_error = report.max_rel_error.max(rel);
        for (a, n) in analytic.iter().zip(&numeric) {
            report.max_abs_error = report.max_abs_error.max((a - n).abs());
        }
    }
    Ok(report)
}
