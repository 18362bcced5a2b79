use crate::error::Result;
use crate::numerics::{Gradients, Precision, Tape, Tensor, Var};

/// Denominator floor for relative errors: coordinates whose gradients are
/// both below this magnitude are compared in absolute terms against it.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-2;

/// Builds the scalar output of `f` on a fresh recording tape and returns
/// its value with the adjoint of every input.
pub fn evaluate_with_gradients<F>(f: F, inputs: &[Tensor], precision: Precision) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new(precision);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads: Gradients = tape.backward(out)?;
    let value = tape.value(out).data()[0];
    let adjoints = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
        .collect();
    Ok((value, adjoints))
}

fn evaluate_value<F>(f: &F, inputs: &[Tensor]) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::inference(Precision::F64);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars);
    tape.value(out).data()[0]
}

#[derive(Debug, Clone)]
pub struct FiniteDifferenceReport {
    /// `(input index, flat coordinate, analytic, numeric, relative error)`.
    pub coordinates: Vec<(usize, usize, f64, f64, f64)>,
    pub max_relative_error: f64,
    pub passed: bool,
}

/// Compares analytic adjoints against central differences
/// `(f(x+h) - f(x-h)) / 2h` at every coordinate, in 64-bit precision.
///
/// An error in the analytic pass (non-finite values, bad loss shape) yields a
/// failed report rather than an error.
pub fn finite_difference_check<F>(f: F, inputs: &[Tensor], h: f64, tolerance: f64) -> FiniteDifferenceReport
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let analytic = match evaluate_with_gradients(&f, inputs, Precision::F64) {
        Ok((_, g)) => g,
        Err(_) => {
            return FiniteDifferenceReport {
                coordinates: Vec::new(),
                max_relative_error: f64::INFINITY,
                passed: false,
            }
        }
    };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    let mut coordinates = Vec::new();
    let mut max_rel: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let x = input.data()[j];
            probe[i].data_mut()[j] = x + h;
            let fp = evaluate_value(&f, &probe);
            probe[i].data_mut()[j] = x - h;
            let fm = evaluate_value(&f, &probe);
            probe[i].data_mut()[j] = x;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[i].data()[j];
            let denom = a.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
            let rel = if numeric.is_finite() { (a - numeric).abs() / denom } else { f64::INFINITY };
            max_rel = max_rel.max(rel);
            coordinates.push((i, j, a, numeric, rel));
        }
    }
    FiniteDifferenceReport {
        coordinates,
        max_relative_error: max_rel,
        passed: max_rel <= tolerance,
    }
}
