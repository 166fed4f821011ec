//! Central finite-difference checking of reverse-mode gradients.
//!
//! The numeric side only ever evaluates forward values, so it is independent
//! of every backward rule it checks.

use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};

/// Outcome of comparing analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    /// `(input, element, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Relative error with a small absolute floor on the denominator so exact
/// zeros compare cleanly.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Checks `d f / d inputs` where `f` builds a scalar on a fresh graph from
/// leaf handles for `inputs`.
pub fn check<F>(inputs: &[Tensor<f64>], eps: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    check_split(inputs, eps, &f, &f)
}

/// Like [`check`], but differentiates `analytic` and takes finite
/// differences of `numeric`. Used when the analytic objective contains
/// detached factors that the numeric side must hold fixed.
pub fn check_split<F, G>(inputs: &[Tensor<f64>], eps: f64, analytic: F, numeric: G) -> Result<GradCheck>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
    G: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = analytic(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = numeric(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut report = GradCheck {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
        worst: None,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let zeros = Tensor::zeros(input.shape().to_vec());
        let analytic = grads.wrt(vars[k]).unwrap_or(&zeros);
        for j in 0..input.len() {
            let orig = input.data()[j];
            work[k].data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work[k].data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work[k].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[j];
            let rel = rel_error(a, numeric);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((k, j, a, numeric));
            }
        }
    }
    Ok(report)
}
