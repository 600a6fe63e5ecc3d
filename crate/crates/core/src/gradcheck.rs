//! Central-difference gradient checking.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Below this magnitude (for both values) the absolute error is reported.
const ABS_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest error over all coordinates of all parameters.
    pub max_rel_error: f64,
    /// Largest error per parameter tensor.
    pub per_param: Vec<f64>,
    /// `(parameter, coordinate, analytic, numeric)` at the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub passed: bool,
}

/// Relative error `|a - b| / max(|a|, |b|)`, falling back to the absolute
/// error when both values are below 1e-8.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    if scale < ABS_FLOOR {
        diff
    } else {
        diff / scale
    }
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out);
    if value.numel() != 1 {
        return Err(Error::shape("grad_check", format!("objective has shape {:?}", value.shape())));
    }
    let v = value.data()[0];
    if !v.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    Ok(v)
}

/// Compares reverse-mode gradients of the scalar objective `f` against
/// `(f(θ+h) − f(θ−h)) / 2h`, coordinate by coordinate.
///
/// `f` receives a fresh tape and one leaf per entry of `params`.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::InvalidArgument(format!("step {h} outside [1e-7, 1e-3]")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    let grads = tape.backward(out)?;

    let mut work = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    let mut worst: Option<(usize, usize, f64, f64)> = None;
    let mut max_err = 0.0f64;
    for (pi, (var, p)) in vars.iter().zip(params).enumerate() {
        let analytic = grads.get_or_zeros(*var, p);
        let mut param_max = 0.0f64;
        for c in 0..p.numel() {
            let orig = p.data()[c];
            work[pi].data_mut()[c] = orig + h;
            let plus = evaluate(&f, &work)?;
            work[pi].data_mut()[c] = orig - h;
            let minus = evaluate(&f, &work)?;
            work[pi].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[c];
            let err = relative_error(a, numeric);
            param_max = param_max.max(err);
            if err > max_err || worst.is_none() {
                max_err = max_err.max(err);
                worst = Some((pi, c, a, numeric));
            }
        }
        per_param.push(param_max);
    }
    Ok(GradCheckReport {
        max_rel_error: max_err,
        per_param,
        worst,
        passed: max_err < tol,
    })
}
