use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Central-difference step used by [`grad_check`].
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic − numeric| / max(1, |numeric|)
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Compares the tape's gradient of a scalar function against central finite
/// differences over every coordinate of every input.
///
/// `f` builds the function on a fresh tape from leaves holding `inputs` and
/// returns the scalar output. It is evaluated twice on the unperturbed inputs
/// first; any bitwise difference makes the check invalid.
pub fn grad_check<F>(f: F, inputs: &[Tensor], tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if inputs.iter().any(|t| !t.is_finite()) {
        return Err(Error::invalid("grad_check inputs must be finite"));
    }

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        if tape.value(out).numel() != 1 {
            return Err(Error::invalid("grad_check function must return a scalar"));
        }
        Ok(tape.value(out).item())
    };

    let base = eval(inputs)?;
    let again = eval(inputs)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::CheckInvalid(format!(
            "function is not deterministic: {base} then {again}"
        )));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
        tolerance,
    };
    let mut perturbed: Vec<Tensor> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        for c in 0..inputs[k].numel() {
            let orig = inputs[k].data()[c];
            perturbed[k].data_mut()[c] = orig + FD_STEP;
            let plus = eval(&perturbed)?;
            perturbed[k].data_mut()[c] = orig - FD_STEP;
            let minus = eval(&perturbed)?;
            perturbed[k].data_mut()[c] = orig;

            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = (analytic.data()[c] - numeric).abs() / numeric.abs().max(1.0);
            report.coordinates += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((k, c));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn identity_has_zero_error() {
        let x = Tensor::scalar(0.7);
        let report = grad_check(|_, v| Ok(v[0]), &[x], 1e-6).unwrap();
        assert!(report.max_rel_error < 1e-9);
        assert!(report.passed());
    }

    #[test]
    fn wrong_gradient_is_detected() {
        // relu at a kink: subgradient 0 vs numeric 0.5
        let x = Tensor::vector(vec![0.0]).unwrap();
        let report = grad_check(
            |t, v| {
                let r = t.relu(v[0]);
                Ok(t.sum(r))
            },
            &[x],
            1e-4,
        )
        .unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn nondeterministic_function_is_rejected() {
        let counter = Cell::new(0.0);
        let x = Tensor::scalar(1.0);
        let err = grad_check(
            |t, v| {
                counter.set(counter.get() + 1.0);
                Ok(t.scale(v[0], counter.get()))
            },
            &[x],
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, Error::CheckInvalid(_)));
    }
}
