//! Central finite-difference gradient checking.

use super::tape::{Tape, Var};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Outcome of a gradient check: the maximum relative error and where it
/// occurred.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_elem: usize,
}

/// Compares the analytic gradient of a scalar-valued closure against
/// central finite differences, returning
/// `max |analytic - numeric| / max(1, |analytic|)` over every element of
/// every input.
///
/// The closure is evaluated once on a differentiable tape for the analytic
/// side and `2 * numel` times on plain tapes for the numeric side, so keep
/// the shapes small.
pub fn grad_check<F, Op>(op: Op, inputs: &[Tensor<F>], eps: f64) -> Result<GradCheckReport>
where
    F: Real,
    Op: Fn(&mut Tape<F>, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Config("grad_check eps must be > 0".into()));
    }

    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.set_requires_grad(true);
            tape.leaf(&t)
        })
        .collect();
    let loss = op(&mut tape, &vars)?;
    if tape.numel(loss) != 1 {
        return Err(Error::NotScalar {
            context: "grad_check",
            numel: tape.numel(loss),
        });
    }
    if !tape.scalar_value(loss).is_finite() {
        return Err(Error::NonFinite {
            context: "grad_check forward".into(),
        });
    }
    let grads = tape.backward(loss, false)?;
    let analytic: Vec<Vec<F>> = vars
        .iter()
        .map(|&v| match grads.grad(v) {
            Some(gv) => tape.value(gv).to_vec(),
            None => vec![F::zero(); tape.numel(v)],
        })
        .collect();

    // Numeric pass. Leaves keep requires_grad so closures that run an
    // inner backward (second-order checks) evaluate the same function.
    let eval = |perturbed: &[Tensor<F>]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed
            .iter()
            .map(|x| {
                let mut x = x.clone();
                x.set_requires_grad(true);
                t.leaf(&x)
            })
            .collect();
        let l = op(&mut t, &vs)?;
        let v = t.scalar_value(l).f64();
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: "grad_check perturbed forward".into(),
            });
        }
        Ok(v)
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_input: 0,
        worst_elem: 0,
    };
    let mut work: Vec<Tensor<F>> = inputs.to_vec();
    for (ii, input) in inputs.iter().enumerate() {
        for ei in 0..input.numel() {
            let orig = input.data()[ei];
            work[ii].data_mut()[ei] = orig + F::of(eps);
            let plus = eval(&work)?;
            work[ii].data_mut()[ei] = orig - F::of(eps);
            let minus = eval(&work)?;
            work[ii].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[ii][ei].f64();
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            if rel > report.max_rel_err {
                report = GradCheckReport {
                    max_rel_err: rel,
                    worst_input: ii,
                    worst_elem: ei,
                };
            }
        }
    }
    Ok(report)
}
