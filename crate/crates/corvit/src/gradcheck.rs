//! Finite-difference gradient checking.
//!
//! Analytic gradients from [`Tape::backward`] are compared against central
//! differences: for each input element, the loss is re-evaluated at ±step and
//! the slope (f(x+h) - f(x-h)) / 2h approximates the derivative. Relative
//! error uses a floor so that near-zero gradients compare absolutely.

use crate::error::Result;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Scale floor below which the error is treated as absolute.
pub const REL_ERR_FLOOR: f64 = 0.01;

/// Relative error between an analytic and a numerical derivative.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Worst-case comparison outcome across all checked elements.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Index of the leaf holding the worst element.
    pub worst_leaf: usize,
    /// Flat element index within that leaf.
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// A differentiable scalar function of several tensors, expressed as a tape
/// builder so it can be replayed for every perturbed evaluation.
pub type LossFn<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

fn eval(leaves: &[Tensor], f: &LossFn) -> Result<f64> {
    let mut tape = Tape::new(false);
    let vars: Vec<Var> = leaves.iter().map(|t| tape.constant(t)).collect();
    let loss = f(&mut tape, &vars)?;
    Ok(tape.data(loss)[0])
}

/// Central-difference gradients of `f` with respect to every element of every
/// leaf.
pub fn finite_diff_grads(leaves: &[Tensor], f: &LossFn, step: f64) -> Result<Vec<Vec<f64>>> {
    let mut work: Vec<Tensor> = leaves.to_vec();
    let mut out = Vec::with_capacity(leaves.len());
    for li in 0..leaves.len() {
        let n = leaves[li].numel();
        let mut g = vec![0.0; n];
        for (j, gj) in g.iter_mut().enumerate() {
            let orig = leaves[li].data()[j];
            work[li].data_mut()[j] = orig + step;
            let up = eval(&work, f)?;
            work[li].data_mut()[j] = orig - step;
            let down = eval(&work, f)?;
            work[li].data_mut()[j] = orig;
            *gj = (up - down) / (2.0 * step);
        }
        out.push(g);
    }
    Ok(out)
}

/// Analytic gradients of `f` via one tape backward pass.
pub fn analytic_grads(leaves: &[Tensor], f: &LossFn) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new(true);
    let vars: Vec<Var> = leaves
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.set_requires_grad(true);
            tape.leaf(&t)
        })
        .collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    Ok(vars
        .iter()
        .zip(leaves)
        .map(|(&v, t)| {
            grads
                .get(v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect())
}

/// Compare analytic and finite-difference gradients element by element and
/// report the worst relative error.
pub fn check_gradients(leaves: &[Tensor], f: &LossFn, step: f64) -> Result<GradCheckReport> {
    let analytic = analytic_grads(leaves, f)?;
    let numeric = finite_diff_grads(leaves, f, step)?;
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_leaf: 0,
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for (li, (ga, gn)) in analytic.iter().zip(&numeric).enumerate() {
        for (j, (&a, &n)) in ga.iter().zip(gn).enumerate() {
            let e = rel_err(a, n);
            if e > report.max_rel_err {
                report = GradCheckReport {
                    max_rel_err: e,
                    worst_leaf: li,
                    worst_index: j,
                    worst_analytic: a,
                    worst_numeric: n,
                };
            }
        }
    }
    Ok(report)
}
