use rayon::prelude::*;
use serde::Serialize;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor for the relative error. Gradients smaller than this are
/// effectively compared in absolute terms, which keeps round-off in
/// near-zero entries from dominating the report.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamCheckStatus {
    Passed,
    Failed,
    /// The parameter does not require a gradient.
    Skipped,
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub index: usize,
    pub numel: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Flat index of the element with the largest relative error.
    pub worst_element: usize,
    pub status: ParamCheckStatus,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.status != ParamCheckStatus::Failed)
    }

    pub fn worst_rel_err(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.status != ParamCheckStatus::Skipped)
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn evaluate<F>(f: &F, params: &[Tensor<f64>], perturbed: Option<(usize, Tensor<f64>)>) -> Result<f64>
where
    F: for<'a> Fn(&mut Tape<'a, f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .enumerate()
        .map(|(i, p)| match &perturbed {
            Some((j, t)) if *j == i => tape.leaf(t.clone()),
            _ => tape.param(p),
        })
        .collect();
    let loss = f(&mut tape, &vars)?;
    let value = tape.value(loss);
    if value.len() != 1 {
        return Err(Error::shape(format!(
            "grad_check: function must return a scalar, got shape {:?}",
            tape.shape(loss)
        )));
    }
    if !value[0].is_finite() {
        return Err(Error::Numeric(format!("grad_check: function value is {}", value[0])));
    }
    Ok(value[0])
}

/// Compares reverse-mode gradients of `f` against central differences
/// `(f(p + h) - f(p - h)) / 2h`, one element at a time.
///
/// `f` receives a fresh tape with `params` already recorded as leaves (in
/// order) and must return a scalar. Parameters without `requires_grad` are
/// reported as skipped. Perturbed evaluations run in parallel; the result
/// does not depend on the thread count.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Tape<'a, f64>, &[Var]) -> Result<Var> + Sync,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Numeric(format!("grad_check: step must be positive, got {step}")));
    }

    let analytic: Vec<Option<Vec<f64>>> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
        let loss = f(&mut tape, &vars)?;
        if !tape.value(loss).iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("grad_check: function value is not finite".into()));
        }
        tape.backward(loss)?;
        vars.iter()
            .zip(params)
            .map(|(&v, p)| {
                p.requires_grad.then(|| {
                    tape.grad(v)
                        .map(<[f64]>::to_vec)
                        .unwrap_or_else(|| vec![0.0; p.numel()])
                })
            })
            .collect()
    };

    let mut checks = Vec::with_capacity(params.len());
    for (i, (p, grad)) in params.iter().zip(&analytic).enumerate() {
        let Some(grad) = grad else {
            checks.push(ParamCheck {
                index: i,
                numel: p.numel(),
                max_rel_err: 0.0,
                max_abs_err: 0.0,
                worst_element: 0,
                status: ParamCheckStatus::Skipped,
            });
            continue;
        };
        let numeric: Vec<f64> = (0..p.numel())
            .into_par_iter()
            .map(|e| {
                let shifted = |delta: f64| {
                    let mut t = p.clone();
                    t.data_mut()[e] += delta;
                    evaluate(&f, params, Some((i, t)))
                };
                Ok((shifted(step)? - shifted(-step)?) / (2.0 * step))
            })
            .collect::<Result<_>>()?;

        let mut worst = (0.0f64, 0usize);
        let mut max_abs = 0.0f64;
        for (e, (&a, &n)) in grad.iter().zip(&numeric).enumerate() {
            let rel = relative_error(a, n);
            if rel > worst.0 {
                worst = (rel, e);
            }
            max_abs = max_abs.max((a - n).abs());
        }
        checks.push(ParamCheck {
            index: i,
            numel: p.numel(),
            max_rel_err: worst.0,
            max_abs_err: max_abs,
            worst_element: worst.1,
            status: if worst.0 < tol {
                ParamCheckStatus::Passed
            } else {
                ParamCheckStatus::Failed
            },
        });
    }
    Ok(GradCheckReport {
        step,
        tol,
        params: checks,
    })
}
