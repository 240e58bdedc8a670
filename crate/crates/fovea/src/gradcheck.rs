//! Finite-difference verification of tape gradients.
//!
//! Runs in 64-bit only; at f32 scale the truncation error of the central
//! difference swamps the signal and the comparison is meaningless.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst relative error over all checked coordinates, with denominator
    /// max(|analytic|, |numeric|, 1e-8).
    pub max_rel_err: f64,
    /// (parameter index, coordinate) of the worst error.
    pub worst: Option<(usize, usize)>,
    pub coords_checked: usize,
}

/// Compare analytic gradients against central finite differences
/// (f(x+eps) - f(x-eps)) / 2eps, coordinate by coordinate.
///
/// `f` must be scalar-valued and deterministic. `analytic[i]` is the
/// caller-computed gradient of `f` w.r.t. `params[i]`. Tensors with more
/// than `max_coords_per_tensor` elements are probed on an evenly strided
/// deterministic subset; pass `usize::MAX` to check every coordinate.
pub fn grad_check<F>(
    f: F,
    params: &[Tensor<f64>],
    analytic: &[Vec<f64>],
    epsilon: f64,
    max_coords_per_tensor: usize,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor<f64>]) -> Result<f64>,
{
    grad_check_multi(f, params, analytic, &[epsilon], max_coords_per_tensor)
}

/// [`grad_check`] over several step sizes, scoring each coordinate by its
/// best-agreeing step. No single step suits every coordinate of a deep
/// composition: rounding noise in the quotient shrinks with a larger step
/// while truncation error shrinks with a smaller one, and coordinates whose
/// true derivative is exactly zero (softmax cancels attention key biases)
/// sit at the noise floor.
pub fn grad_check_multi<F>(
    mut f: F,
    params: &[Tensor<f64>],
    analytic: &[Vec<f64>],
    epsilons: &[f64],
    max_coords_per_tensor: usize,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor<f64>]) -> Result<f64>,
{
    if epsilons.is_empty() {
        return Err(Error::Argument("no step sizes given".into()));
    }
    if params.len() != analytic.len() {
        return Err(Error::Argument(format!(
            "{} params but {} gradient vectors",
            params.len(),
            analytic.len()
        )));
    }
    for (i, (p, a)) in params.iter().zip(analytic).enumerate() {
        if p.numel() != a.len() {
            return Err(Error::Dimension(format!(
                "param {i}: {} values but gradient has {}",
                p.numel(),
                a.len()
            )));
        }
    }

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        coords_checked: 0,
    };

    for pi in 0..params.len() {
        let n = params[pi].numel();
        let coords: Vec<usize> = if n <= max_coords_per_tensor {
            (0..n).collect()
        } else {
            // Evenly strided deterministic sample.
            (0..max_coords_per_tensor)
                .map(|j| j * n / max_coords_per_tensor)
                .collect()
        };
        for ci in coords {
            let orig = work[pi].data()[ci];
            let a = analytic[pi][ci];
            let mut best_rel = f64::INFINITY;
            for &epsilon in epsilons {
                work[pi].data_mut()[ci] = orig + epsilon;
                let f_plus = f(&work)?;
                work[pi].data_mut()[ci] = orig - epsilon;
                let f_minus = f(&work)?;
                work[pi].data_mut()[ci] = orig;

                if !f_plus.is_finite() || !f_minus.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite output near param {pi} coord {ci}: f+={f_plus}, f-={f_minus}"
                    )));
                }
                let numeric = (f_plus - f_minus) / (2.0 * epsilon);
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                best_rel = best_rel.min(rel);
            }
            report.coords_checked += 1;
            if best_rel > report.max_rel_err {
                report.max_rel_err = best_rel;
                report.worst = Some((pi, ci));
            }
        }
    }
    Ok(report)
}
