//! Central finite-difference gradient checking.

use crate::error::{Error, Result};
use crate::numcore::tape::{Tape, Var};
use crate::numcore::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`.
    pub rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }
}

/// Relative error between two gradient vectors.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

pub fn compare_gradients(name: &str, analytic: &[f64], numeric: &[f64], tolerance: f64) -> GradCheckEntry {
    let rel_error = relative_error(analytic, numeric);
    GradCheckEntry {
        name: name.to_string(),
        rel_error,
        passed: rel_error.is_finite() && rel_error < tolerance,
    }
}

fn eval<F>(inputs: &[(String, Tensor)], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| tape.constant(t)).collect();
    let loss = f(&mut tape, &vars)?;
    if tape.value(loss).len() != 1 {
        return Err(Error::NonScalarLoss(tape.shape(loss).to_vec()));
    }
    Ok(tape.scalar_value(loss))
}

/// Analytic gradients of the scalar built by `f`, one per input.
pub fn analytic_gradients<F>(inputs: &[(String, Tensor)], f: &F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|(_, t)| tape.param(t, true))
        .collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, (_, t))| grads.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect())
}

/// Central differences `(f(x+h) − f(x−h)) / 2h`, one coordinate at a time.
pub fn numeric_gradients<F>(inputs: &[(String, Tensor)], step: f64, f: &F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut work: Vec<(String, Tensor)> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..work.len() {
        let mut g = vec![0.0; work[i].1.len()];
        for (j, gj) in g.iter_mut().enumerate() {
            let orig = work[i].1.data()[j];
            work[i].1.data_mut()[j] = orig + step;
            let plus = eval(&work, f)?;
            work[i].1.data_mut()[j] = orig - step;
            let minus = eval(&work, f)?;
            work[i].1.data_mut()[j] = orig;
            *gj = (plus - minus) / (2.0 * step);
        }
        out.push(g);
    }
    Ok(out)
}

/// Compares analytic and numeric gradients for every input.
///
/// Only graph construction can fail; mismatches are reported, not raised.
pub fn finite_diff_check<F>(inputs: &[(String, Tensor)], step: f64, tolerance: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(inputs, &f)?;
    let numeric = numeric_gradients(inputs, step, &f)?;
    let entries = inputs
        .iter()
        .zip(analytic.iter().zip(&numeric))
        .map(|((name, _), (a, n))| compare_gradients(name, a, n, tolerance))
        .collect();
    Ok(GradCheckReport { tolerance, entries })
}
