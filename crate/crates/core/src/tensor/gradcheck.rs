use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Clone, Debug)]
pub struct FdReport {
    /// Largest per-coordinate relative error.
    pub max_rel_error: f64,
    /// Flat index of the coordinate with the largest error.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub checked: Vec<usize>,
    pub tol: f64,
    pub passed: bool,
}

/// Denominator floor for the relative error, so coordinates with vanishing
/// gradient are compared in absolute terms.
const REL_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks the gradient of the scalar function `f` at `x` on every coordinate.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<FdReport>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    finite_diff_check_at(f, x, &all, h, tol)
}

/// Like [`finite_diff_check`] but only on the listed flat coordinates.
pub fn finite_diff_check_at<F>(f: F, x: &Tensor, coords: &[usize], h: f64, tol: f64) -> Result<FdReport>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    let analytic_full = {
        let g = Graph::new();
        let xv = g.param(x.clone());
        let loss = f(&g, xv)?;
        g.backward(loss)?.get_or_zeros(xv)
    };
    let eval = |t: Tensor| -> Result<f64> {
        let g = Graph::new();
        let xv = g.constant(t);
        Ok(f(&g, xv)?.value().data()[0])
    };
    let mut analytic = Vec::with_capacity(coords.len());
    let mut numeric = Vec::with_capacity(coords.len());
    let mut max_rel_error = 0.0;
    let mut worst_index = coords.first().copied().unwrap_or(0);
    for &i in coords {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let n = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic_full.data()[i];
        let e = relative_error(a, n);
        if e > max_rel_error || e.is_nan() {
            max_rel_error = e;
            worst_index = i;
        }
        analytic.push(a);
        numeric.push(n);
    }
    Ok(FdReport {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
        checked: coords.to_vec(),
        tol,
        passed: max_rel_error < tol,
    })
}
