//! Central finite-difference gradient checking.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max |analytic − numeric| / max(1, |numeric|)
    pub max_rel_error: f64,
    /// (parameter index, flat element index) of the worst entry.
    pub worst: (usize, usize),
    pub entries_checked: usize,
}

/// Compares the reverse-mode gradient of the scalar built by `f` against
/// central differences with step `h`, for every element of every parameter.
///
/// `f` receives a fresh graph and one [`Var`] per parameter, in order.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Usage(format!("grad_check step must be > 0, got {h}")));
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let root = f(&mut g, &vars)?;
        Ok(g.scalar(root))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
    let root = f(&mut g, &vars)?;
    let grads = g.backward(root)?;

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        entries_checked: 0,
    };
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var, params[pi].shape());
        for ei in 0..params[pi].len() {
            let orig = params[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + h;
            let plus = eval(&work)?;
            work[pi].data_mut()[ei] = orig - h;
            let minus = eval(&work)?;
            work[pi].data_mut()[ei] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite {
                    what: "perturbed objective",
                    param: pi.to_string(),
                    index: ei,
                });
            }
            let numeric = (plus - minus) / (2.0 * h);
            let err = (analytic.data()[ei] - numeric).abs() / numeric.abs().max(1.0);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (pi, ei);
            }
            report.entries_checked += 1;
        }
    }
    Ok(report)
}
