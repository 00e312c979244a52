//! Central finite-difference gradient checking.
//!
//! Numerical derivatives are taken from forward evaluations only, so they are independent
//! of the backward rules they are compared against.

use super::params::{ParamId, ParamSet};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Gradients smaller than this are compared in absolute rather than relative terms.
pub const MAGNITUDE_FLOOR: f64 = 1e-2;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
}

impl GradCheckReport {
    fn record(&mut self, analytic: f64, numeric: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR);
        let rel = (analytic - numeric).abs() / denom;
        self.max_rel_error = self.max_rel_error.max(rel);
        self.checked += 1;
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.checked += other.checked;
    }
}

fn scalar_of(tape: &Tape, v: Var) -> f64 {
    tape.value(v).data().iter().sum()
}

/// Checks `d f / d inputs` for every input element. `f` must return a scalar.
pub fn check_inputs<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.leaf(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec)
        })
        .collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = inputs
            .iter()
            .map(|t| tape.leaf(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        Ok(scalar_of(&tape, out))
    };

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (ti, grads) in analytic.iter().enumerate() {
        for (ei, &a) in grads.iter().enumerate() {
            let orig = work[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + h;
            let plus = eval(&work)?;
            work[ti].data_mut()[ei] = orig - h;
            let minus = eval(&work)?;
            work[ti].data_mut()[ei] = orig;
            report.record(a, (plus - minus) / (2.0 * h));
        }
    }
    Ok(report)
}

/// Checks parameter gradients for the listed `(param, element)` coordinates.
pub fn check_params<F>(
    params: &ParamSet,
    coords: &[(ParamId, usize)],
    h: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var>,
{
    let mut tracked = params.clone();
    tracked.zero_grads();
    let mut tape = Tape::new();
    let out = f(&mut tape, &tracked)?;
    tape.backward(out)?;
    tape.accumulate_param_grads(&mut tracked)?;

    let mut work = params.clone();
    let mut report = GradCheckReport::default();
    for &(pid, ei) in coords {
        let a = tracked.get(pid).grad.as_ref().expect("zeroed above")[ei];
        let orig = work.value(pid).data()[ei];
        let mut eval = |delta: f64| -> Result<f64> {
            work.get_mut(pid).value.data_mut()[ei] = orig + delta;
            let mut tape = Tape::new();
            let out = f(&mut tape, &work)?;
            Ok(scalar_of(&tape, out))
        };
        let plus = eval(h)?;
        let minus = eval(-h)?;
        work.get_mut(pid).value.data_mut()[ei] = orig;
        report.record(a, (plus - minus) / (2.0 * h));
    }
    Ok(report)
}
