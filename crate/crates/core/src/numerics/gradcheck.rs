//! Central finite-difference verification of tape gradients.

use std::collections::BTreeMap;

use super::{Array, Param, Parameterized, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_rel_error: f64,
    pub per_parameter_errors: BTreeMap<String, f64>,
    pub passed: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<28} max rel error {:.3e}  {}",
            self.op_name,
            self.max_rel_error,
            if self.passed { "ok" } else { "FAILED" }
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval_value<M, F>(model: &M, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &M) -> Result<Var>,
{
    let mut tape = Tape::inference();
    let out = f(&mut tape, model)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::NonScalarLoss {
            shape: v.shape().to_vec(),
        });
    }
    Ok(v.item())
}

/// Compares tape gradients of the scalar `f(model)` against central
/// differences `(f(p + h) - f(p - h)) / 2h`, perturbing one parameter entry
/// at a time. `f` must bind parameters through [`Tape::param`].
///
/// Rejects `f` when two evaluations at the same point disagree, and when a
/// top-k selection inside `f` has a margin smaller than `10 h`.
pub fn finite_diff_check_model<M, F>(
    op_name: &str,
    model: &mut M,
    h: f64,
    tol: f64,
    f: F,
) -> Result<GradCheckReport>
where
    M: Parameterized,
    F: Fn(&mut Tape, &M) -> Result<Var>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::invalid(format!("gradient check: step h = {h} must be positive")));
    }
    let first = eval_value(model, &f)?;
    let second = eval_value(model, &f)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut tape = Tape::new();
    let loss = f(&mut tape, model)?;
    let margin = tape.topk_margin();
    if margin < 10.0 * h {
        return Err(Error::TieMargin {
            margin,
            required: 10.0 * h,
        });
    }
    tape.backward(loss)?;
    let analytic = tape.param_grads();

    let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
    let mut per_parameter_errors = BTreeMap::new();
    for (idx, name) in names.iter().enumerate() {
        let Some(grad) = analytic.get(name) else {
            continue;
        };
        let mut worst: f64 = 0.0;
        for e in 0..grad.len() {
            let orig = model.params()[idx].value.data()[e];
            model.params_mut()[idx].value.data_mut()[e] = orig + h;
            let plus = eval_value(model, &f);
            model.params_mut()[idx].value.data_mut()[e] = orig - h;
            let minus = eval_value(model, &f);
            model.params_mut()[idx].value.data_mut()[e] = orig;
            let numeric = (plus? - minus?) / (2.0 * h);
            worst = worst.max(relative_error(grad.data()[e], numeric));
        }
        per_parameter_errors.insert(name.clone(), worst);
    }
    let max_rel_error = per_parameter_errors.values().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        op_name: op_name.to_string(),
        max_rel_error,
        per_parameter_errors,
        passed: max_rel_error < tol,
    })
}

/// Array-level form: `f` receives one leaf per input, in order.
pub fn finite_diff_check<F>(
    op_name: &str,
    inputs: &[(&str, Array)],
    h: f64,
    tol: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut params: Vec<Param> = inputs
        .iter()
        .map(|(n, a)| Param::new(*n, a.clone()))
        .collect();
    finite_diff_check_model(op_name, &mut params, h, tol, |tape, ps: &Vec<Param>| {
        let vars = ps.iter().map(|p| tape.param(p)).collect::<Result<Vec<_>>>()?;
        f(tape, &vars)
    })
}
