//! Central finite-difference oracle for tape gradients (64-bit only).
//!
//! Excluded input class: points where `f` is not differentiable, e.g. a
//! hard max evaluated exactly at a tie. The check reports a large error
//! there and callers must sample away from such points.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// `(f(x+ε) − f(x−ε)) / 2ε` for a perturbation-parameterised `f`.
pub fn central_difference(mut f: impl FnMut(f64) -> Result<f64>, eps: f64) -> Result<f64> {
    let hi = f(eps)?;
    let lo = f(-eps)?;
    if !hi.is_finite() || !lo.is_finite() {
        return Err(Error::NonFinite(format!("f(x±eps) = {hi}, {lo}")));
    }
    Ok((hi - lo) / (2.0 * eps))
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Coordinate with the largest error.
    pub worst: usize,
    pub checked: usize,
}

/// Compare the tape gradient of `f` at `x` against central differences on
/// every coordinate.
pub fn grad_check<B>(build: B, x: &Tensor<f64>, eps: f64) -> Result<GradCheck>
where
    B: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let eval = |t: &Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t.clone());
        let out = build(&mut g, v)?;
        let y = g.value(out);
        if y.numel() != 1 {
            return Err(Error::Contract(format!("f must be scalar, got {:?}", y.shape())));
        }
        Ok(y.item())
    };

    let mut g = Graph::new();
    let v = g.leaf(x.clone(), true);
    let out = build(&mut g, v)?;
    if !g.value(out).is_finite() {
        return Err(Error::NonFinite("f(x)".into()));
    }
    g.backward(out)?;
    let analytic = g
        .grad(v)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: 0,
        checked: 0,
    };
    for i in 0..x.numel() {
        let numeric = central_difference(
            |d| {
                let mut p = x.clone();
                p.data_mut()[i] += d;
                eval(&p)
            },
            eps,
        )?;
        let err = relative_error(analytic.data()[i], numeric);
        if err > report.max_rel_error || report.checked == 0 {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = i;
        }
        report.checked += 1;
    }
    Ok(report)
}
