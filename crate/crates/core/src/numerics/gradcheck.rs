//! Central finite-difference gradient checking.
//!
//! The checker only evaluates the forward function; it never touches the
//! tape's backward rules, so it serves as an independent oracle for them.

use crate::error::Result;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;

/// Outcome of comparing an analytic gradient against finite differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_error < rel_tol
    }
}

/// Relative error with an absolute floor so that near-zero gradients do not
/// blow up the ratio.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / scale
}

/// Compares `analytic` (the gradient of `f` at `point`) against central
/// differences with the given `step`, at the element indices in `indices`
/// (all elements when `None`).
pub fn check_gradient(
    f: &mut dyn FnMut(&Tensor) -> f64,
    point: &Tensor,
    analytic: &Tensor,
    step: f64,
    indices: Option<&[usize]>,
) -> GradCheck {
    assert_eq!(point.shape(), analytic.shape(), "gradient shape must match the point");
    let all: Vec<usize>;
    let indices = match indices {
        Some(ix) => ix,
        None => {
            all = (0..point.numel()).collect();
            &all
        }
    };
    let mut probe = point.clone();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
    };
    for &i in indices {
        let x0 = point.data()[i];
        probe.data_mut()[i] = x0 + step;
        let up = f(&probe);
        probe.data_mut()[i] = x0 - step;
        let down = f(&probe);
        probe.data_mut()[i] = x0;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic.data()[i];
        report.max_rel_error = report.max_rel_error.max(relative_error(a, numeric));
        report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
        report.checked += 1;
    }
    report
}

/// Checks every input of a tape-built scalar function.
///
/// `build` receives the tape and one node per entry of `inputs` and returns
/// the scalar output node. Analytic gradients come from one backward pass
/// with all inputs as leaves; the finite differences rebuild the function
/// with the perturbed input. `indices[i]` restricts the probed elements of
/// input `i` (all when `None`).
pub fn check_tape_function(
    build: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
    inputs: &[Tensor],
    step: f64,
    indices: &[Option<Vec<usize>>],
) -> Result<Vec<GradCheck>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut reports = Vec::with_capacity(inputs.len());
    for (i, point) in inputs.iter().enumerate() {
        let mut failure = None;
        let mut f = |probe: &Tensor| -> f64 {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, t)| tape.constant(if j == i { probe.clone() } else { t.clone() }))
                .collect();
            match build(&mut tape, &vars) {
                Ok(v) => tape.value(v).data()[0],
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        };
        let probe_ix = indices.get(i).and_then(|ix| ix.as_deref());
        let report = check_gradient(&mut f, point, &grads.get(vars[i]), step, probe_ix);
        if let Some(e) = failure {
            return Err(e);
        }
        reports.push(report);
    }
    Ok(reports)
}
