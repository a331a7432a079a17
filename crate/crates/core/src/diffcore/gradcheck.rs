//! Central-difference checks of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Gradients of magnitude below this are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

/// Worst disagreement found by [`check_gradients`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, REL_FLOOR)`.
    pub max_rel_err: f64,
    /// `(input, flat index)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub entries: usize,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

fn evaluate<F>(inputs: &[Tensor], graph: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = graph(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Checks the gradient of the scalar built by `graph` against central
/// differences of the same graph.
pub fn check_gradients<F>(inputs: &[Tensor], eps: f64, graph: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_gradients_against(inputs, eps, &graph, |xs: &[Tensor], _| evaluate(xs, &graph))
}

/// Like [`check_gradients`], but differentiates `value(inputs, k)` numerically
/// for input `k`. Useful when the backward pass intentionally differs from
/// the forward value, as with gradient reversal.
pub fn check_gradients_against<F, V>(inputs: &[Tensor], eps: f64, graph: F, value: V) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    V: Fn(&[Tensor], usize) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!("step must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = graph(&mut tape, &vars)?;
    if !tape.value(out).is_scalar() {
        return Err(Error::Contract("gradient check needs a scalar output".into()));
    }
    let grads = tape.backward(out)?;

    let mut report = GradReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        entries: 0,
    };
    let mut work = inputs.to_vec();
    for (k, (&var, input)) in vars.iter().zip(inputs).enumerate() {
        let analytic = grads.get_or_zeros(var, input.shape());
        for j in 0..input.len() {
            let base = input.data()[j];
            work[k].data_mut()[j] = base + eps;
            let up = value(&work, k)?;
            work[k].data_mut()[j] = base - eps;
            let down = value(&work, k)?;
            work[k].data_mut()[j] = base;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[j];
            let err = relative_error(a, numeric);
            report.entries += 1;
            if !(err <= report.max_rel_err) {
                report.max_rel_err = err;
                report.worst = (k, j);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
