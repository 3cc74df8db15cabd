//! Finite-difference verification of tape gradients.
//!
//! The checker rebuilds the graph from scratch for every probe, so the
//! closure must be deterministic: same parameter values in, same loss out.
//! Central differences `(f(x+eps) - f(x-eps)) / (2 eps)` are compared
//! coordinate-by-coordinate against one analytic backward pass.

use crate::graph::{AutodiffError, Graph, Var};
use crate::tensor::Tensor;

/// Outcome of a [`gradient_check`] run; `max_rel_err` is the headline number.
#[derive(Clone, Copy, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter index and flat coordinate where the worst error occurred.
    pub worst_param: usize,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Total number of coordinates probed.
    pub coords: usize,
}

/// Compares analytic gradients of `f` against central finite differences.
///
/// `f` receives a fresh graph plus one leaf per entry of `params` (in order,
/// all requiring grad) and must return a scalar loss variable. The relative
/// error at each coordinate is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn gradient_check<F>(
    f: F,
    params: &[Tensor],
    eps: f64,
) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, AutodiffError>,
{
    if !(eps.is_finite() && eps > 0.0) {
        return Err(AutodiffError::InvalidArg {
            op: "gradient_check",
            msg: format!("step size must be positive and finite, got {eps}"),
        });
    }
    if params.is_empty() {
        return Err(AutodiffError::EmptyInput { op: "gradient_check" });
    }

    // One analytic pass.
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.leaf(t, true)).collect();
    let loss = f(&mut g, &vars)?;
    if g.values(loss).len() != 1 {
        return Err(AutodiffError::NotScalar {
            op: "gradient_check",
            shape: g.shape(loss).to_vec(),
        });
    }
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();
    drop(g);

    let eval = |probe: &[Tensor]| -> Result<f64, AutodiffError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = probe.iter().map(|t| g.leaf(t, true)).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.scalar_value(loss))
    };

    let mut probe: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: 0,
        worst_coord: 0,
        analytic: 0.0,
        numeric: 0.0,
        coords: 0,
    };
    #[allow(clippy::needless_range_loop)] // `ci` walks probe, analytic, and report together
    for pi in 0..params.len() {
        for ci in 0..params[pi].numel() {
            let orig = params[pi].values()[ci];
            probe[pi].values_mut()[ci] = orig + eps;
            let plus = eval(&probe)?;
            probe[pi].values_mut()[ci] = orig - eps;
            let minus = eval(&probe)?;
            probe[pi].values_mut()[ci] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(AutodiffError::NonFiniteProbe { param: pi, coord: ci });
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi][ci];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.coords += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = pi;
                report.worst_coord = ci;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
