//! Dense tensors, reverse-mode differentiation and a finite-difference
//! gradient oracle.
//!
//! All arithmetic is `f64`. Reductions run in a fixed order, so a computation
//! repeated with the same inputs is bit-identical.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, FD_STEP};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var, MASKED};
pub use tensor::Tensor;

pub(crate) use tape::softmax_into;

use crate::error::{Error, Result};

/// `softmax(scale · v)`, stabilized by subtracting the maximum.
pub fn scaled_softmax(v: &[f64], scale: f64) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::invalid(format!(
            "softmax scale must be positive, got {scale}"
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::domain("softmax input contains a non-finite value"));
    }
    let mut out = vec![0.0; v.len()];
    softmax_into(v, scale, None, &mut out);
    Ok(out)
}

/// Cosine similarity of two equal-length vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "cosine of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::domain("cosine of a zero-norm vector"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb))
}
