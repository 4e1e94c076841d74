//! Trainable parameters and finite-difference gradient verification.

use crate::error::{Error, Result};

use super::matrix::Matrix;
use super::tape::{Tape, Var};

/// A matrix value with its gradient buffer.
#[derive(Clone, Debug)]
pub struct Param {
    pub value: Matrix,
    pub grad: Matrix,
    pub trainable: bool,
}

impl Param {
    pub fn new(value: Matrix, trainable: bool) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Self { value, grad, trainable }
    }

    pub fn trainable(value: Matrix) -> Self {
        Self::new(value, true)
    }

    pub fn frozen(value: Matrix) -> Self {
        Self::new(value, false)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }

    /// Records the value on `tape` as a leaf.
    pub fn register(&self, tape: &mut Tape) -> Var {
        tape.leaf(self.value.clone(), self.trainable)
    }

    pub fn zero_grad(&mut self) {
        self.grad = Matrix::zeros(self.value.rows(), self.value.cols());
    }

    /// Plain SGD step. Frozen params are left untouched.
    pub fn sgd_step(&mut self, lr: f64) -> Result<()> {
        if self.trainable {
            self.value.axpy(-lr, &self.grad)?;
        }
        Ok(())
    }
}

/// One coordinate whose analytic and numeric gradients disagree.
#[derive(Clone, Debug, PartialEq)]
pub struct GradMismatch {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub failures: Vec<GradMismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Absolute floor of the relative-error denominator; coordinates whose
/// gradients are both below it are compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn evaluate<F>(f: &F, params: &[Param]) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| p.register(&mut tape)).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).shape() != (1, 1) {
        return Err(Error::Evaluation("grad_check target must be scalar".into()));
    }
    let v = tape.scalar(out);
    if !v.is_finite() {
        return Err(Error::Evaluation("non-finite objective".into()));
    }
    Ok((tape, vars, out))
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` receives the tape and one leaf per entry of `params`, in order. On
/// return every param's `grad` holds the analytic gradient (zero for frozen
/// params).
pub fn grad_check<F>(f: F, params: &mut [Param], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::Config(format!("grad_check eps {eps:e} outside [1e-6, 1e-3]")));
    }
    let (tape, vars, out) = evaluate(&f, params)?;
    let grads = tape.backward(out)?;
    for (p, v) in params.iter_mut().zip(&vars) {
        p.grad = if p.trainable {
            grads.get_or_zeros(*v, p.shape())
        } else {
            Matrix::zeros(p.value.rows(), p.value.cols())
        };
    }

    let mut report = GradCheckReport::default();
    let mut work: Vec<Param> = params.to_vec();
    for pi in 0..work.len() {
        if !work[pi].trainable {
            continue;
        }
        for idx in 0..work[pi].value.len() {
            let orig = work[pi].value.data()[idx];
            work[pi].value.data_mut()[idx] = orig + eps;
            let plus =
                evaluate(&f, &work).map_err(|e| Error::Evaluation(format!("f(x+eps) at param {pi}[{idx}]: {e}")))?;
            let f_plus = plus.0.scalar(plus.2);
            work[pi].value.data_mut()[idx] = orig - eps;
            let minus =
                evaluate(&f, &work).map_err(|e| Error::Evaluation(format!("f(x-eps) at param {pi}[{idx}]: {e}")))?;
            let f_minus = minus.0.scalar(minus.2);
            work[pi].value.data_mut()[idx] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let analytic = params[pi].grad.data()[idx];
            let rel = rel_error(analytic, numeric);
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel > tol {
                report.failures.push(GradMismatch {
                    param: pi,
                    index: idx,
                    analytic,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(report)
}
