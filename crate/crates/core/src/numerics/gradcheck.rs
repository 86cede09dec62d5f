//! Finite-difference verification of reverse-mode gradients.

use crate::error::{Error, Result};

use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Denominator floor of the relative error, per unit of function value.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

/// How often the starting step may shrink when a probe lands on a different
/// smooth piece than the base point.
const MAX_STEP_REDUCTIONS: usize = 12;

/// Reductions after which a point whose two sides lie on different pieces
/// is treated as sitting on the kink itself.
const ONE_SIDED_AFTER: usize = 2;

/// Step ratio between successive rows of the extrapolation tableau.
const CON: f64 = 2.0;
const TABLEAU: usize = 10;
/// Stop once the higher-order estimates drift this much beyond the best
/// error estimate.
const SAFE: f64 = 2.0;
/// Relative error estimate below which the tableau counts as settled.
const SETTLED: f64 = 1e-4;
/// Stop once the error estimate falls below this fraction of the scale.
const TARGET: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<WorstElement>,
    pub checked: usize,
    /// Function value at the checked point.
    pub value: f64,
    /// Elements whose starting step had to shrink to stay off a kink.
    pub reduced_steps: usize,
    /// Elements sitting on a kink, checked with a one-sided difference.
    pub one_sided: usize,
    /// Elements for which no kink-free step was found.
    pub unresolved: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WorstElement {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8 · max(1, |scale|))`, where `scale` is the
/// function value. Components far below the function's roundoff level are
/// compared absolutely.
pub fn relative_error(analytic: f64, numeric: f64, scale: f64) -> f64 {
    let floor = REL_ERROR_FLOOR * scale.abs().max(1.0);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks the gradient of a scalar function of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let report = grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)?;
    Ok(report.max_rel_error)
}

/// Which difference quotient feeds the tableau.
#[derive(Clone, Copy)]
enum Stencil {
    Central,
    /// `(f(x + s·h) - f(x)) / (s·h)` with `s = ±1`.
    OneSided(f64),
}

/// Checks the gradient of a scalar function w.r.t. every element of every
/// input against finite differences.
///
/// Each derivative is estimated by Ridders' extrapolation: central
/// differences at steps `ε, ε/2, ε/4, …` are combined in a Neville tableau
/// until the error estimate stops improving, so both steep and flat
/// directions get a suitable step.
///
/// Every evaluation runs on a branch-tracking tape. If a probe sits on a
/// different piece of a piecewise-smooth function (a ReLU flipped, a max
/// moved), the starting step shrinks until the probes share the base point's
/// piece. A point that sits exactly on a kink (a ReLU input of exactly zero)
/// has no two-sided derivative; there the side that stays on the base
/// point's piece gives a one-sided estimate.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!("grad_check step must be positive, got {eps}")));
    }
    let eval = |xs: &[Tensor]| -> Result<(f64, u64)> {
        let mut tape = Tape::tracking_branches();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let value = tape.value(out);
        if value.len() != 1 {
            return Err(Error::Evaluation(format!("function is not scalar: {:?}", value.shape())));
        }
        let v = value.item();
        if !v.is_finite() {
            return Err(Error::Evaluation(format!("function value is {v}")));
        }
        Ok((v, tape.branch_signature().unwrap_or(0)))
    };

    let mut tape = Tape::tracking_branches();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 || !tape.value(out).is_finite() {
        return Err(Error::Evaluation("function value is not a finite scalar".into()));
    }
    let base_value = tape.value(out).item();
    let base_sig = tape.branch_signature().unwrap_or(0);
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(&tape, v)).collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        value: base_value,
        reduced_steps: 0,
        one_sided: 0,
        unresolved: 0,
    };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (gi, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let x0 = input.data()[j];
            // value at x0 + step, and whether it lies on the base piece
            let mut at = |step: f64| -> Result<(f64, bool)> {
                probe[gi].data_mut()[j] = x0 + step;
                let (v, sig) = eval(&probe)?;
                probe[gi].data_mut()[j] = x0;
                Ok((v, sig == base_sig))
            };

            let mut h = eps;
            let mut reductions = 0;
            let start = loop {
                let (fp, sp) = at(h)?;
                let (fm, sm) = at(-h)?;
                if sp && sm {
                    break Some((Stencil::Central, (fp - fm) / (2.0 * h)));
                }
                if reductions >= ONE_SIDED_AFTER {
                    if sp {
                        break Some((Stencil::OneSided(1.0), (fp - base_value) / h));
                    }
                    if sm {
                        break Some((Stencil::OneSided(-1.0), (base_value - fm) / h));
                    }
                }
                if reductions == MAX_STEP_REDUCTIONS {
                    report.unresolved += 1;
                    break None;
                }
                reductions += 1;
                h /= 4.0;
            };
            if reductions > 0 {
                report.reduced_steps += 1;
            }
            let numeric = match start {
                None => {
                    let (fp, _) = at(h)?;
                    let (fm, _) = at(-h)?;
                    (fp - fm) / (2.0 * h)
                }
                Some((stencil, first)) => {
                    if matches!(stencil, Stencil::OneSided(_)) {
                        report.one_sided += 1;
                    }
                    let scale = REL_ERROR_FLOOR * base_value.abs().max(1.0);
                    ridders(first, h, stencil, scale, |step| {
                        Ok(match stencil {
                            Stencil::Central => {
                                let (fp, sp) = at(step)?;
                                let (fm, sm) = at(-step)?;
                                (sp && sm).then(|| (fp - fm) / (2.0 * step))
                            }
                            Stencil::OneSided(s) => {
                                let (v, same) = at(s * step)?;
                                same.then(|| s * (v - base_value) / step)
                            }
                        })
                    })?
                }
            };

            let a = analytic[gi].data()[j];
            let err = relative_error(a, numeric, base_value);
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some(WorstElement {
                    input: gi,
                    index: j,
                    analytic: a,
                    numeric,
                });
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Ridders' polynomial extrapolation of a difference quotient `d(h)` to
/// `h = 0`. `d` returns `None` once a probe leaves the base piece; the best
/// estimate so far is kept.
fn ridders(
    first: f64,
    mut h: f64,
    stencil: Stencil,
    floor: f64,
    mut d: impl FnMut(f64) -> Result<Option<f64>>,
) -> Result<f64> {
    // central differences carry only even powers of h
    let ratio = match stencil {
        Stencil::Central => CON * CON,
        Stencil::OneSided(_) => CON,
    };
    let mut prev = vec![first];
    let mut ans = first;
    let mut err = f64::INFINITY;
    for i in 1..TABLEAU {
        h /= CON;
        let Some(di) = d(h)? else { break };
        let mut row = Vec::with_capacity(i + 1);
        row.push(di);
        let mut fac = ratio;
        for k in 1..=i {
            let next = (row[k - 1] * fac - prev[k - 1]) / (fac - 1.0);
            fac *= ratio;
            let errt = (next - row[k - 1]).abs().max((next - prev[k - 1]).abs());
            if errt <= err {
                err = errt;
                ans = next;
            }
            row.push(next);
        }
        // drift past the best estimate signals roundoff, but only once the
        // tableau has settled; before that the step is still too coarse
        let settled = err <= SETTLED * ans.abs().max(floor);
        if settled && (row[i] - prev[i - 1]).abs() >= SAFE * err {
            break;
        }
        if err <= TARGET * ans.abs().max(floor) {
            break;
        }
        prev = row;
    }
    Ok(ans)
}
