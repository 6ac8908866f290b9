//! Ways of merging the aggregated feature `F_hat` into the token stream `Q`.
//! All weights act on row vectors: a token `x` maps to `x W`.

use super::params::{FusionParams, Injection};
use crate::error::{Error, Result};
use crate::numerics::{Array, Param, Tape, Var};

fn weight<'a>(p: &'a Option<Param>, what: &str, params: &FusionParams) -> Result<&'a Param> {
    p.as_ref()
        .ok_or_else(|| Error::invalid(format!("variant {} has no {what}", params.variant)))
}

/// `Q + F_hat W_out`.
pub fn residual_on(tape: &mut Tape, q: Var, f_hat: Var, params: &FusionParams) -> Result<Var> {
    let w_out = tape.param(weight(&params.injection.w_out, "w_out", params)?)?;
    let proj = tape.matmul(f_hat, w_out)?;
    tape.add(q, proj)
}

/// `Q * (1 + F_hat W_scale) + F_hat W_shift`.
pub fn film_on(tape: &mut Tape, q: Var, f_hat: Var, params: &FusionParams) -> Result<Var> {
    let w_scale = tape.param(weight(&params.injection.w_scale, "w_scale", params)?)?;
    let w_shift = tape.param(weight(&params.injection.w_shift, "w_shift", params)?)?;
    let scale = tape.matmul(f_hat, w_scale)?;
    let scale = tape.add_scalar(scale, 1.0)?;
    let shift = tape.matmul(f_hat, w_shift)?;
    let modulated = tape.mul(q, scale)?;
    tape.add(modulated, shift)
}

/// `Q + (sigmoid(G W_gate) * F_hat) W_out` where `G` is `Q` or `[Q; F_hat]`.
fn gated_on(tape: &mut Tape, q: Var, f_hat: Var, gate_input: Var, params: &FusionParams) -> Result<Var> {
    let w_gate = tape.param(weight(&params.injection.w_gate, "w_gate", params)?)?;
    let w_out = tape.param(weight(&params.injection.w_out, "w_out", params)?)?;
    let gate = tape.matmul(gate_input, w_gate)?;
    let gate = tape.sigmoid(gate)?;
    let gated = tape.mul(gate, f_hat)?;
    let proj = tape.matmul(gated, w_out)?;
    tape.add(q, proj)
}

pub fn gated2d_on(tape: &mut Tape, q: Var, f_hat: Var, params: &FusionParams) -> Result<Var> {
    gated_on(tape, q, f_hat, q, params)
}

pub fn gated2d3d_on(tape: &mut Tape, q: Var, f_hat: Var, params: &FusionParams) -> Result<Var> {
    let both = tape.concat_cols(q, f_hat)?;
    gated_on(tape, q, f_hat, both, params)
}

/// Applies the injection selected by the variant.
pub fn inject_on(tape: &mut Tape, q: Var, f_hat: Var, params: &FusionParams) -> Result<Var> {
    match params.variant.injection() {
        Injection::Residual => residual_on(tape, q, f_hat, params),
        Injection::Film => film_on(tape, q, f_hat, params),
        Injection::Gated2D => gated2d_on(tape, q, f_hat, params),
        Injection::Gated2D3D => gated2d3d_on(tape, q, f_hat, params),
    }
}

type InjectFn = fn(&mut Tape, Var, Var, &FusionParams) -> Result<Var>;

fn eval(q: &Array, f_hat: &Array, params: &FusionParams, f: InjectFn) -> Result<Array> {
    if q.shape() != f_hat.shape() {
        return Err(Error::ShapeMismatch {
            op: "inject",
            left: q.shape().to_vec(),
            right: f_hat.shape().to_vec(),
        });
    }
    let mut tape = Tape::inference();
    let (qv, fv) = (tape.constant(q.clone())?, tape.constant(f_hat.clone())?);
    let out = f(&mut tape, qv, fv, params)?;
    Ok(tape.value(out).clone())
}

pub fn inject_residual(q: &Array, f_hat: &Array, params: &FusionParams) -> Result<Array> {
    eval(q, f_hat, params, residual_on)
}

pub fn inject_film(q: &Array, f_hat: &Array, params: &FusionParams) -> Result<Array> {
    eval(q, f_hat, params, film_on)
}

pub fn inject_gated2d(q: &Array, f_hat: &Array, params: &FusionParams) -> Result<Array> {
    eval(q, f_hat, params, gated2d_on)
}

pub fn inject_gated2d3d(q: &Array, f_hat: &Array, params: &FusionParams) -> Result<Array> {
    eval(q, f_hat, params, gated2d3d_on)
}
