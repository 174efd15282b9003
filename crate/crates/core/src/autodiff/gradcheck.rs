//! Central finite-difference gradient checking.
//!
//! Only ever evaluates the forward pass, so it is an oracle independent of
//! every backward rule on the tape.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Worst disagreement between analytic and numeric gradients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares `backward` against central differences for every element of
/// every input. `f` must build a scalar from the supplied leaves.
pub fn check<F>(inputs: &[Tensor], eps: f64, floor: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.data(out)[0])
    };

    let mut report = GradCheck { max_rel_err: 0.0, max_abs_err: 0.0, checked: 0 };
    let mut work = inputs.to_vec();
    for (ti, grads) in analytic.iter().enumerate() {
        for ei in 0..inputs[ti].numel() {
            let orig = inputs[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + eps;
            let plus = eval(&work)?;
            work[ti].data_mut()[ei] = orig - eps;
            let minus = eval(&work)?;
            work[ti].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grads[ei];
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            report.max_rel_err = report.max_rel_err.max(rel_err(a, numeric, floor));
            report.checked += 1;
        }
    }
    Ok(report)
}
