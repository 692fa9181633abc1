//! Central finite-difference verification of analytic gradients.

use serde::Serialize;

use super::Parameters;
use crate::error::{Error, Result};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared in absolute rather than relative terms.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub coordinates: usize,
    pub max_relative_error: f64,
    pub worst_index: Option<usize>,
    pub tolerance: f64,
    pub passed: bool,
}

/// Relative error of one coordinate, with the finite-difference value as reference.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(RELATIVE_FLOOR)
}

/// Checks the gradient returned by `f` at `x` against central differences of
/// the loss returned by `f`.
pub fn grad_check<F>(f: F, x: &[f64], tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let (loss, analytic) = f(x);
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss is {loss} at the check point")));
    }
    if analytic.len() != x.len() {
        return Err(Error::shape("analytic gradient", x.len(), analytic.len()));
    }
    let mut point = x.to_vec();
    let mut acc = Accumulator::new(tolerance);
    for i in 0..x.len() {
        let orig = point[i];
        point[i] = orig + FD_STEP;
        let plus = f(&point).0;
        point[i] = orig - FD_STEP;
        let minus = f(&point).0;
        point[i] = orig;
        acc.push(i, analytic[i], central(plus, minus)?)?;
    }
    Ok(acc.finish(x.len()))
}

/// [`grad_check`] over every tensor of a parameter structure. `f` returns the
/// loss and its analytic gradient as a structure of the same shape.
pub fn grad_check_params<P, F>(params: &P, f: F, tolerance: f64) -> Result<GradCheckReport>
where
    P: Parameters + Clone,
    F: Fn(&P) -> (f64, P),
{
    let (loss, analytic) = f(params);
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss is {loss} at the check point")));
    }
    let analytic = analytic.flatten();
    let n = params.num_params();
    if analytic.len() != n {
        return Err(Error::shape("analytic gradient", n, analytic.len()));
    }
    let mut probe = params.clone();
    let mut acc = Accumulator::new(tolerance);
    let mut flat = 0;
    let n_tensors = probe.tensors().len();
    for t in 0..n_tensors {
        let len = probe.tensors()[t].len();
        for j in 0..len {
            let orig = probe.tensors()[t][j];
            probe.tensors_mut()[t][j] = orig + FD_STEP;
            let plus = f(&probe).0;
            probe.tensors_mut()[t][j] = orig - FD_STEP;
            let minus = f(&probe).0;
            probe.tensors_mut()[t][j] = orig;
            acc.push(flat, analytic[flat], central(plus, minus)?)?;
            flat += 1;
        }
    }
    Ok(acc.finish(n))
}

/// Numeric Jacobian `J[o][i] = ∂f_o/∂x_i` by central differences.
pub fn numeric_jacobian<F>(f: F, x: &[f64], h: f64) -> Vec<Vec<f64>>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let outputs = f(x).len();
    let mut jac = vec![vec![0.0; x.len()]; outputs];
    let mut point = x.to_vec();
    for i in 0..x.len() {
        let orig = point[i];
        point[i] = orig + h;
        let plus = f(&point);
        point[i] = orig - h;
        let minus = f(&point);
        point[i] = orig;
        for o in 0..outputs {
            jac[o][i] = (plus[o] - minus[o]) / (2.0 * h);
        }
    }
    jac
}

fn central(plus: f64, minus: f64) -> Result<f64> {
    if !plus.is_finite() || !minus.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss during finite differences ({plus}, {minus})"
        )));
    }
    Ok((plus - minus) / (2.0 * FD_STEP))
}

struct Accumulator {
    tolerance: f64,
    max: f64,
    worst: Option<usize>,
}

impl Accumulator {
    fn new(tolerance: f64) -> Self {
        Self {
            tolerance,
            max: 0.0,
            worst: None,
        }
    }

    fn push(&mut self, index: usize, analytic: f64, numeric: f64) -> Result<()> {
        if !analytic.is_finite() {
            return Err(Error::Numeric(format!(
                "analytic gradient coordinate {index} is {analytic}"
            )));
        }
        let err = relative_error(analytic, numeric);
        if err > self.max || self.worst.is_none() {
            self.max = self.max.max(err);
            self.worst = Some(index);
        }
        Ok(())
    }

    fn finish(self, coordinates: usize) -> GradCheckReport {
        GradCheckReport {
            coordinates,
            max_relative_error: self.max,
            worst_index: self.worst,
            tolerance: self.tolerance,
            passed: self.max < self.tolerance,
        }
    }
}
