//! Dense `f64` arrays, a reverse-mode tape with the kernels the fusion
//! module needs, and a finite-difference gradient checker.

mod array;
pub mod gradcheck;
mod param;
pub mod select;
mod tape;

pub use array::Array;
pub use gradcheck::{finite_diff_check, finite_diff_check_model, GradCheckReport};
pub use param::{Param, Parameterized};
pub use select::{masked_softmax_rows, topk_indices};
pub use tape::{Tape, Var};

use crate::error::Result;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Forward-only layer normalization of each row of `x`.
pub fn layer_norm(x: &Array, gamma: &Array, beta: &Array, eps: f64) -> Result<Array> {
    let mut tape = Tape::inference();
    let (x, g, b) = (
        tape.constant(x.clone())?,
        tape.constant(gamma.clone())?,
        tape.constant(beta.clone())?,
    );
    let y = tape.layer_norm(x, g, b, eps)?;
    Ok(tape.value(y).clone())
}

/// Forward-only matrix product.
pub fn matmul(a: &Array, b: &Array) -> Result<Array> {
    let mut tape = Tape::inference();
    let (a, b) = (tape.constant(a.clone())?, tape.constant(b.clone())?);
    let y = tape.matmul(a, b)?;
    Ok(tape.value(y).clone())
}
