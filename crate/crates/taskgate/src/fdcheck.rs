//! Finite-difference verification of analytic gradients.
//!
//! The checker rebuilds the forward pass from scratch for every probe, so the
//! loss closure must be deterministic in the parameter values alone. Central
//! differences with step 1e-5 resolve the crate's f64 losses to well below
//! the 1e-4 acceptance tolerance.

use crate::error::{Error, Result};
use crate::params::ParamSet;

pub const FD_EPSILON: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

/// Central-difference stencil order.
///
/// `Central2` is the classic two-point probe, truncation error O(eps^2).
/// `Central4` is the five-point probe, truncation error O(eps^4); it tolerates
/// a much coarser step, which keeps the loss differences far above f64
/// rounding on coordinates whose true gradient sits below the relative-error
/// floor.
///
/// `Central4Auto` runs the five-point probe over a geometric ladder of steps
/// (eps, 2eps, 4eps, 8eps), picks the neighboring pair that agree best with
/// each other, and extrapolates that pair to step zero. Rounding noise
/// dominates at the small end of the ladder and truncation at the large end,
/// so the best-agreeing pair sits on the plateau between them wherever it
/// falls for that coordinate. The selection sees only the numeric values,
/// never the analytic gradient, so it cannot bias the comparison toward
/// passing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    Central2,
    Central4,
    Central4Auto,
}

fn central2<E>(eval: &mut E, eps: f64) -> Result<f64>
where
    E: FnMut(f64) -> Result<f64>,
{
    Ok((eval(eps)? - eval(-eps)?) / (2.0 * eps))
}

fn central4<E>(eval: &mut E, eps: f64) -> Result<f64>
where
    E: FnMut(f64) -> Result<f64>,
{
    Ok((eval(-2.0 * eps)? - eval(2.0 * eps)? + 8.0 * (eval(eps)? - eval(-eps)?)) / (12.0 * eps))
}

fn central4_auto<E>(eval: &mut E, base: f64) -> Result<f64>
where
    E: FnMut(f64) -> Result<f64>,
{
    let mut prev: Option<f64> = None;
    let mut best: Option<(f64, f64)> = None;
    let mut eps = base;
    for _ in 0..4 {
        let d = central4(eval, eps)?;
        if let Some(p) = prev {
            let disagreement = (d - p).abs();
            if best.is_none_or(|(b, _)| disagreement < b) {
                // doubling the step scales the eps^4 truncation term by 16,
                // so this combination cancels it across the pair
                best = Some((disagreement, (16.0 * p - d) / 15.0));
            }
        }
        prev = Some(d);
        eps *= 2.0;
    }
    Ok(best.expect("ladder evaluates at least two steps").1)
}

#[derive(Debug, Clone)]
pub struct FdReport {
    /// worst relative error over all probed coordinates
    pub max_rel_err: f64,
    /// parameter name and flat index where the worst error occurred
    pub worst: Option<(String, usize)>,
    pub probes: usize,
}

impl FdReport {
    pub fn passes(&self) -> bool {
        self.max_rel_err <= FD_TOLERANCE
    }
}

/// Relative error with a floor so near-zero gradient pairs compare sanely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Compare analytic gradients against central differences with step
/// `FD_EPSILON`.
///
/// `loss` evaluates the scalar loss for the given parameters. `grad` returns
/// the analytic gradient for one named parameter (zeros if the parameter is
/// off the loss path). `coords` selects which flat indices of each parameter
/// to probe; `None` probes every coordinate.
pub fn check_gradients<L, G>(
    params: &ParamSet,
    names: &[&str],
    coords: Option<usize>,
    loss: L,
    grad: G,
) -> Result<FdReport>
where
    L: FnMut(&ParamSet) -> Result<f64>,
    G: Fn(&str) -> Result<Vec<f64>>,
{
    check_gradients_with(params, names, coords, FD_EPSILON, Stencil::Central2, loss, grad)
}

/// Same check with a caller-chosen step size and stencil.
///
/// The step trades truncation error against f64 cancellation in the loss
/// differences (which grows as 1/epsilon). For losses of magnitude around
/// one, two-point steps below 1e-5 leave roughly 1e-11 of rounding noise in
/// the quotient, which reads as a large relative error wherever the true
/// gradient sits under the 1e-8 denominator floor; the four-point stencil at
/// a coarser step avoids both failure modes at once.
pub fn check_gradients_with<L, G>(
    params: &ParamSet,
    names: &[&str],
    coords: Option<usize>,
    epsilon: f64,
    stencil: Stencil,
    mut loss: L,
    grad: G,
) -> Result<FdReport>
where
    L: FnMut(&ParamSet) -> Result<f64>,
    G: Fn(&str) -> Result<Vec<f64>>,
{
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!(
            "finite-difference step must be positive, got {epsilon}"
        )));
    }
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst: None,
        probes: 0,
    };
    for &name in names {
        let p = params.get(name)?;
        let analytic = grad(name)?;
        if analytic.len() != p.data.len() {
            return Err(Error::ShapeMismatch {
                op: "fd_check",
                detail: format!(
                    "gradient for {name} has {} entries, parameter has {}",
                    analytic.len(),
                    p.data.len()
                ),
            });
        }
        let stride = match coords {
            Some(k) if k > 0 && p.data.len() > k => p.data.len().div_ceil(k),
            _ => 1,
        };
        for ix in (0..p.data.len()).step_by(stride) {
            let mut eval_at = |offset: f64| -> Result<f64> {
                let mut shifted = params.clone();
                shifted.get_mut(name)?.data[ix] += offset;
                loss(&shifted)
            };
            let numeric = match stencil {
                Stencil::Central2 => central2(&mut eval_at, epsilon)?,
                Stencil::Central4 => central4(&mut eval_at, epsilon)?,
                Stencil::Central4Auto => central4_auto(&mut eval_at, epsilon)?,
            };
            let err = rel_err(analytic[ix], numeric);
            report.probes += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((name.to_string(), ix));
            }
        }
    }
    Ok(report)
}
