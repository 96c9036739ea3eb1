use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of [`grad_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |numeric|)` over all coordinates.
    pub max_rel_error: f64,
    /// `(parameter, coordinate)` where the maximum occurred.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// Compares reverse-mode gradients of a scalar function against central differences.
///
/// `f` builds the loss from one leaf per entry of `params`. Runs at 64-bit precision;
/// `h` must lie in `[1e-6, 1e-4]`.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::Invalid(format!("finite-difference step {h} outside [1e-6, 1e-4]")));
    }
    let tape = Tape::new();
    let vars: Vec<_> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|v| grads.get(*v).cloned().expect("leaf gradient"))
        .collect();

    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        Ok(f(&tape, &vars)?.value().item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    let mut work = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for i in 0..p.numel() {
            let orig = p.data()[i];
            work[pi].data_mut()[i] = orig + h;
            let plus = eval(&work);
            work[pi].data_mut()[i] = orig - h;
            let minus = eval(&work);
            work[pi].data_mut()[i] = orig;
            let fail = |reason: String| Error::GradCheck {
                param: pi,
                index: i,
                reason,
            };
            let (plus, minus) = match (plus, minus) {
                (Ok(a), Ok(b)) => (a, b),
                (Err(e), _) | (_, Err(e)) => return Err(fail(e.to_string())),
            };
            let numeric = (plus - minus) / (2.0 * h);
            if !numeric.is_finite() {
                return Err(fail("non-finite central difference".into()));
            }
            let rel = (analytic[pi].data()[i] - numeric).abs() / numeric.abs().max(1.0);
            report.coordinates += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (pi, i);
            }
        }
    }
    Ok(report)
}
