//! Central finite-difference oracle for tape gradients.
//!
//! The oracle only evaluates forward values; it never touches a backward
//! implementation, so it can check any op recorded on a [`Tape`].

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Relative error floor: below this magnitude the comparison is absolute.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, element index) of the worst element.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Deterministic projection weights used to reduce tensor outputs to a scalar.
fn projection(shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |i| ((i as f64 + 1.0) * 0.7548776662466927).fract() * 2.0 - 1.0)
}

fn scalar_output<F>(tape: &mut Tape, vars: &[Var], f: &F) -> Result<Var>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let y = f(tape, vars)?;
    if tape.value(y).numel() == 1 {
        return Ok(y);
    }
    let w = tape.constant(projection(tape.value(y).shape()));
    let prod = tape.mul(y, w)?;
    Ok(tape.sum(prod))
}

fn evaluate<F>(inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let y = scalar_output(&mut tape, &vars, f)?;
    Ok(tape.value(y).item())
}

/// Compares analytic gradients of `f` with respect to every element of every
/// input marked in `differentiable` against central differences with step `h`.
pub fn check_gradients<F>(inputs: &[Tensor], differentiable: &[bool], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(differentiable)
        .map(|(t, &d)| if d { tape.param(t.clone()) } else { tape.constant(t.clone()) })
        .collect();
    let y = scalar_output(&mut tape, &vars, &f)?;
    let grads = tape.backward(y)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (k, (&v, &d)) in vars.iter().zip(differentiable).enumerate() {
        if !d {
            continue;
        }
        let analytic = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for e in 0..inputs[k].numel() {
            let orig = inputs[k].data()[e];
            probe[k].data_mut()[e] = orig + h;
            let plus = evaluate(&probe, &f)?;
            probe[k].data_mut()[e] = orig - h;
            let minus = evaluate(&probe, &f)?;
            probe[k].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel > report.max_rel_error || !rel.is_finite() {
                report.max_rel_error = if rel.is_finite() { rel } else { f64::INFINITY };
                report.worst = (k, e);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
