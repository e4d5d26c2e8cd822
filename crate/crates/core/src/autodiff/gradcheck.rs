//! Central-difference verification of analytic gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max |analytic − numeric| / max(|analytic|, |numeric|, 1e-8)
    pub max_rel_error: f64,
    /// (buffer, element) where the maximum occurred.
    pub worst: (usize, usize),
    pub checked: usize,
    pub passed: bool,
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic` against central differences of `eval` over every
/// element of `buffers`. `eval` sees the perturbed buffers; each buffer is
/// restored before the next coordinate.
pub fn finite_difference_check(
    buffers: &mut [Vec<f64>],
    analytic: &[Vec<f64>],
    step: f64,
    tolerance: f64,
    mut eval: impl FnMut(&[Vec<f64>]) -> Result<f64>,
) -> Result<GradCheckReport> {
    if buffers.len() != analytic.len() || buffers.iter().zip(analytic).any(|(b, a)| b.len() != a.len()) {
        return Err(Error::Input("analytic gradients do not match the parameter buffers".into()));
    }
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), checked: 0, passed: true };
    for b in 0..buffers.len() {
        for e in 0..buffers[b].len() {
            let orig = buffers[b][e];
            buffers[b][e] = orig + step;
            let plus = eval(buffers)?;
            buffers[b][e] = orig - step;
            let minus = eval(buffers)?;
            buffers[b][e] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!("non-finite value while perturbing buffer {b} element {e}")));
            }
            let numeric = (plus - minus) / (2.0 * step);
            let err = rel_error(analytic[b][e], numeric);
            if !err.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient at buffer {b} element {e}")));
            }
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (b, e);
            }
            report.checked += 1;
        }
    }
    report.passed = report.max_rel_error < tolerance;
    Ok(report)
}

/// Gradient check of a scalar function built on a fresh tape from `inputs`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    if !tape.scalar(loss)?.is_finite() {
        return Err(Error::Numeric("non-finite loss".into()));
    }
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> =
        vars.iter().zip(inputs).map(|(&v, t)| tape.grad(v).unwrap_or_else(|| vec![0.0; t.len()])).collect();

    let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape.clone()).collect();
    let mut buffers: Vec<Vec<f64>> = inputs.iter().map(|t| t.data.clone()).collect();
    finite_difference_check(&mut buffers, &analytic, step, tolerance, |bufs| {
        let tape = Tape::new();
        let vars: Vec<Var> =
            bufs.iter().zip(&shapes).map(|(b, s)| tape.constant(Tensor { shape: s.clone(), data: b.clone() })).collect();
        let out = f(&tape, &vars)?;
        tape.scalar(out)
    })
}
