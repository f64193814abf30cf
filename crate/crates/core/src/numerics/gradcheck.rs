use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Outcome of comparing tape gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error over every scalar of every parameter.
    pub max_rel_error: f64,
    /// Worst relative error per parameter, in input order.
    pub per_param: Vec<f64>,
    pub evaluations: usize,
}

/// Relative error used throughout: |analytic − numeric| / max(1e-8, |numeric|).
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1e-8)
}

/// How the numeric derivative is estimated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DiffScheme {
    /// `(f(x + eps) − f(x − eps)) / 2eps`.
    Central { eps: f64 },
    /// Central differences at steps shrinking from `h0`, extrapolated to
    /// zero step; the estimate with the smallest internal error is kept.
    /// Far less sensitive to rounding when the function value is large
    /// compared to the derivative.
    Ridders { h0: f64 },
}

/// Compares the reverse-mode gradient of `f` against central differences.
///
/// `f` receives a fresh tape and the parameters registered on it as
/// trainable leaves, and must return a scalar. It is called once for the
/// analytic gradient and at least twice per parameter scalar, so it has to
/// be a deterministic function of the parameter values.
pub fn finite_diff_check<F>(params: &[Tensor], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: for<'t> FnMut(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    finite_diff_check_with(params, DiffScheme::Central { eps }, f)
}

pub fn finite_diff_check_with<F>(params: &[Tensor], scheme: DiffScheme, mut f: F) -> Result<GradCheckReport>
where
    F: for<'t> FnMut(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = params.iter().map(|p| tape.param(p.clone())).collect();
        let root = f(&tape, &vars)?;
        let grads = tape.backward(&root)?;
        vars.iter().map(|v| grads.wrt(v)).collect()
    };

    let mut evaluations = 1;
    let mut work: Vec<Tensor> = params.to_vec();
    let mut eval = |work: &mut Vec<Tensor>, pi: usize, j: usize, x: f64| -> Result<f64> {
        work[pi].data_mut()[j] = x;
        evaluations += 1;
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = work.iter().map(|p| tape.param(p.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut per_param = Vec::with_capacity(params.len());
    for (pi, grad) in analytic.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for j in 0..params[pi].numel() {
            let orig = params[pi].data()[j];
            let mut central = |h: f64| -> Result<f64> {
                let up = eval(&mut work, pi, j, orig + h)?;
                let down = eval(&mut work, pi, j, orig - h)?;
                Ok((up - down) / (2.0 * h))
            };
            let numeric = match scheme {
                DiffScheme::Central { eps } => central(eps)?,
                DiffScheme::Ridders { h0 } => ridders(h0, &mut central)?,
            };
            work[pi].data_mut()[j] = orig;
            worst = worst.max(relative_error(grad.data()[j], numeric));
        }
        per_param.push(worst);
    }
    let max_rel_error = per_param.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        per_param,
        evaluations,
    })
}

const RIDDERS_SHRINK: f64 = 1.4;
const RIDDERS_LEVELS: usize = 10;
const RIDDERS_SAFE: f64 = 2.0;

/// Polynomial extrapolation of central differences to zero step.
fn ridders(h0: f64, central: &mut dyn FnMut(f64) -> Result<f64>) -> Result<f64> {
    let shrink2 = RIDDERS_SHRINK * RIDDERS_SHRINK;
    let mut table = vec![vec![0.0; RIDDERS_LEVELS]; RIDDERS_LEVELS];
    let mut h = h0;
    table[0][0] = central(h)?;
    let mut best = table[0][0];
    let mut err = f64::INFINITY;
    for i in 1..RIDDERS_LEVELS {
        h /= RIDDERS_SHRINK;
        table[0][i] = central(h)?;
        let mut fac = shrink2;
        for j in 1..=i {
            table[j][i] = (table[j - 1][i] * fac - table[j - 1][i - 1]) / (fac - 1.0);
            fac *= shrink2;
            let e = (table[j][i] - table[j - 1][i])
                .abs()
                .max((table[j][i] - table[j - 1][i - 1]).abs());
            if e <= err {
                err = e;
                best = table[j][i];
            }
        }
        if (table[i][i] - table[i - 1][i - 1]).abs() >= RIDDERS_SAFE * err {
            break;
        }
    }
    Ok(best)
}
