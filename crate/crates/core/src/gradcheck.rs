//! Central-difference gradient checking against the tape.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Denominator floor of the relative error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Floor {
    Absolute(f64),
    /// `max(1e-8, c · max_i |cd_i|)`: coordinates far below the gradient's
    /// own scale are judged on absolute error at f32 resolution.
    Scaled(f64),
}

impl Floor {
    fn resolve(self, numeric: &[Vec<f64>]) -> f64 {
        match self {
            Floor::Absolute(f) => f,
            Floor::Scaled(c) => {
                let max = numeric.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
                (c * max).max(1e-8)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckReport {
    /// Max over coordinates of `|analytic − cd| / max(|analytic|, |cd|, floor)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub coordinates: usize,
    /// (input, coordinate) of the largest relative error.
    pub worst: Option<(usize, usize)>,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks `f` at a single input. `f` must build a scalar from the given leaf.
pub fn gradcheck<F>(f: F, x: &Tensor, step: f32) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    gradcheck_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), step)
        .map(|r| r.max_rel_error)
}

/// Checks `f` against every coordinate of every input, differencing `f`
/// itself on fresh tapes.
pub fn gradcheck_many<F>(f: F, inputs: &[Tensor], step: f32) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_grads(&f, inputs)?;
    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item()? as f64)
    };
    let mut numeric = Vec::with_capacity(inputs.len());
    let mut probe = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        let mut col = Vec::with_capacity(input.len());
        for i in 0..input.len() {
            let orig = input.data()[i];
            probe[ti].data_mut()[i] = orig + step;
            let plus = eval(&probe)?;
            probe[ti].data_mut()[i] = orig - step;
            let minus = eval(&probe)?;
            probe[ti].data_mut()[i] = orig;
            // The perturbation actually applied after f32 rounding.
            let h = ((orig + step) as f64 - (orig - step) as f64) / 2.0;
            col.push((plus - minus) / (2.0 * h));
        }
        numeric.push(col);
    }
    Ok(compare(&analytic, &numeric, Floor::Absolute(1e-8)))
}

/// Checks the tape gradients of `f` against central differences of an
/// independent `oracle` evaluated in f64 at the same point.
pub fn gradcheck_oracle<F, O>(f: F, oracle: O, inputs: &[Tensor], step: f64, floor: Floor) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    O: Fn(&[Vec<f64>]) -> f64,
{
    let analytic = analytic_grads(&f, inputs)?;
    let mut probe: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.data().iter().map(|&v| v as f64).collect())
        .collect();
    let mut numeric = Vec::with_capacity(inputs.len());
    for ti in 0..inputs.len() {
        let mut col = Vec::with_capacity(probe[ti].len());
        for i in 0..probe[ti].len() {
            let orig = probe[ti][i];
            probe[ti][i] = orig + step;
            let plus = oracle(&probe);
            probe[ti][i] = orig - step;
            let minus = oracle(&probe);
            probe[ti][i] = orig;
            let cd = (plus - minus) / (2.0 * step);
            if !cd.is_finite() {
                return Err(Error::Numeric("oracle produced a non-finite difference".into()));
            }
            col.push(cd);
        }
        numeric.push(col);
    }
    Ok(compare(&analytic, &numeric, floor))
}

fn analytic_grads<F>(f: &F, inputs: &[Tensor]) -> Result<Vec<Vec<f32>>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if inputs.iter().any(|t| !t.is_finite()) {
        return Err(Error::Numeric("gradcheck input is not finite".into()));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.len()], <[f32]>::to_vec))
        .collect())
}

fn compare(analytic: &[Vec<f32>], numeric: &[Vec<f64>], floor: Floor) -> GradcheckReport {
    let floor = floor.resolve(numeric);
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        coordinates: 0,
        worst: None,
    };
    for (ti, (a_col, n_col)) in analytic.iter().zip(numeric).enumerate() {
        for (i, (&a, &cd)) in a_col.iter().zip(n_col).enumerate() {
            let a = a as f64;
            let rel = relative_error(a, cd, floor);
            report.max_abs_error = report.max_abs_error.max((a - cd).abs());
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((ti, i));
            }
            report.coordinates += 1;
        }
    }
    report
}
