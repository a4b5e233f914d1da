//! Central finite-difference checks for functions built on a [`Tape`].

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Magnitude below which a gradient counts as zero; sits just above the
/// rounding noise of an f64 five-point difference with step ~1e-4.
pub const FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(FLOOR, |analytic|, |numeric|)`.
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub checked: usize,
}

/// Fourth-order central difference `(8(f(+h) - f(-h)) - (f(+2h) - f(-2h))) / 12h`.
pub fn five_point(mut f: impl FnMut(f64) -> Result<f64>, x: f64, h: f64) -> Result<f64> {
    let (p1, m1) = (f(x + h)?, f(x - h)?);
    let (p2, m2) = (f(x + 2.0 * h)?, f(x - 2.0 * h)?);
    Ok((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h))
}

/// Compares analytic gradients of `f` against central differences with step `h`.
///
/// `f` records a scalar loss on a fresh tape from the supplied input vars.
/// `stride` subsamples coordinates of large inputs (1 checks all of them).
pub fn check_gradients<F>(f: F, inputs: &[Tensor], h: f64, stride: usize) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_index: 0,
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(&tape, *var);
        for j in (0..inputs[i].len()).step_by(stride.max(1)) {
            let orig = inputs[i].data()[j];
            let numeric = five_point(
                |x| {
                    work[i].data_mut()[j] = x;
                    eval(&work)
                },
                orig,
                h,
            )?;
            work[i].data_mut()[j] = orig;
            let a = analytic[j];
            let rel = (a - numeric).abs() / FLOOR.max(a.abs()).max(numeric.abs());
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_input = i;
                report.worst_index = j;
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
