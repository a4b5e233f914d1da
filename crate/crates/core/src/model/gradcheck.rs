use super::forward::Graph;
use super::params::Model;
use crate::error::Result;
use crate::numerics::gradcheck::{five_point, FLOOR};
use crate::numerics::{GradCheckReport, Var};

/// Central-difference check of every model parameter coordinate chosen by
/// `coords(param_index, len)` against the tape gradient of `loss`.
pub fn check_model<F, C>(model: &Model, loss: F, h: f64, coords: C) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
    C: Fn(usize, usize) -> Vec<usize>,
{
    let eval = |m: &Model| -> Result<f64> {
        let mut g = Graph::frozen(m);
        let v = loss(&mut g)?;
        Ok(g.value(v).item())
    };
    let mut g = Graph::new(model);
    let v = loss(&mut g)?;
    let analytic = g.param_grads(v)?;
    drop(g);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_index: 0,
        checked: 0,
    };
    let mut work = model.clone();
    for (i, grad) in analytic.iter().enumerate() {
        for j in coords(i, grad.len()) {
            let orig = model.params()[i].data()[j];
            let numeric = five_point(
                |x| {
                    work.params_mut()[i].data_mut()[j] = x;
                    eval(&work)
                },
                orig,
                h,
            )?;
            work.params_mut()[i].data_mut()[j] = orig;
            let a = grad[j];
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
