//! Multi-kernel RBF maximum mean discrepancy.
//!
//! The estimator is the biased V-statistic
//! `mean(K_XX) + mean(K_YY) - 2*mean(K_XY)` with means over all index pairs,
//! using a sum of RBF kernels `exp(-||x-y||^2 / (2*sigma^2))` over the bank's
//! widths. The bank is unweighted: contributions are summed, not averaged.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A set of RBF bandwidths combined by unweighted summation.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBank {
    widths: Vec<f64>,
}

impl KernelBank {
    pub fn new(widths: Vec<f64>) -> Result<Self> {
        if widths.is_empty() {
            return Err(Error::InvalidArgument("kernel bank needs at least one width".into()));
        }
        if widths.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "kernel widths must be positive and finite, got {widths:?}"
            )));
        }
        Ok(KernelBank { widths })
    }

    pub fn single(width: f64) -> Result<Self> {
        KernelBank::new(vec![width])
    }

    /// Bank centered on a bandwidth: `sigma * {1/4, 1/2, 1, 2, 4}`.
    pub fn median_scaled(sigma: f64) -> Result<Self> {
        KernelBank::new([0.25, 0.5, 1.0, 2.0, 4.0].iter().map(|f| f * sigma).collect())
    }

    pub fn widths(&self) -> &[f64] {
        &self.widths
    }

    pub fn size(&self) -> usize {
        self.widths.len()
    }

    fn eval(&self, sq_dist: f64) -> f64 {
        self.widths
            .iter()
            .map(|&w| (-sq_dist / (2.0 * w * w)).exp())
            .sum()
    }

    /// d/d(sq_dist) of `eval`.
    fn eval_deriv(&self, sq_dist: f64) -> f64 {
        self.widths
            .iter()
            .map(|&w| {
                let inv = 1.0 / (2.0 * w * w);
                -inv * (-sq_dist * inv).exp()
            })
            .sum()
    }
}

fn check_rows(x: &Tensor, y: &Tensor, context: &str) -> Result<(usize, usize, usize)> {
    if x.shape().len() != 2 || y.shape().len() != 2 {
        return Err(Error::InvalidArgument(format!(
            "{context} expects 2-D sample matrices, got {:?} and {:?}",
            x.shape(),
            y.shape()
        )));
    }
    let (n, d) = (x.dim(0), x.dim(1));
    let (m, dy) = (y.dim(0), y.dim(1));
    if n == 0 || m == 0 {
        return Err(Error::EmptyInput(format!("{context} needs nonempty sample sets")));
    }
    if d != dy {
        return Err(Error::shape(context, &[n, d], &[m, dy]));
    }
    Ok((n, m, d))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&u, &v)| {
            let t = u - v;
            t * t
        })
        .sum()
}

/// Pairwise summed-RBF kernel matrix, entry `(i, j) = k(x_i, y_j)`.
pub fn rbf_kernel_matrix(x: &Tensor, y: &Tensor, bank: &KernelBank) -> Result<Tensor> {
    let (n, m, _) = check_rows(x, y, "rbf_kernel_matrix")?;
    let mut out = Tensor::zeros(vec![n, m]);
    let od = out.data_mut();
    for i in 0..n {
        let xi = x.row(i);
        for j in 0..m {
            od[i * m + j] = bank.eval(sq_dist(xi, y.row(j)));
        }
    }
    Ok(out)
}

/// Squared MMD between the row sets of `x` and `y` (biased estimator).
pub fn mmd_sq(x: &Tensor, y: &Tensor, bank: &KernelBank) -> Result<f64> {
    let (n, m, _) = check_rows(x, y, "mmd_sq")?;
    let mean = |k: &Tensor| k.data().iter().sum::<f64>() / k.len() as f64;
    let kxx = rbf_kernel_matrix(x, x, bank)?;
    let kyy = rbf_kernel_matrix(y, y, bank)?;
    let kxy = rbf_kernel_matrix(x, y, bank)?;
    let _ = (n, m);
    Ok(mean(&kxx) + mean(&kyy) - 2.0 * mean(&kxy))
}

/// Gradient of the biased squared-MMD estimator with respect to each row of
/// the local-stream samples `y`; the global stream `x` is held fixed.
pub fn mmd_grad(x_global: &Tensor, y_local: &Tensor, bank: &KernelBank) -> Result<Tensor> {
    let (n, m, d) = check_rows(x_global, y_local, "mmd_grad")?;
    let mut grad = Tensor::zeros(vec![m, d]);
    let gd = grad.data_mut();
    let yy_coef = 2.0 / (m * m) as f64;
    let xy_coef = -2.0 / (n * m) as f64;
    for l in 0..m {
        let yl = y_local.row(l);
        let g_row = &mut gd[l * d..(l + 1) * d];
        // (1/m^2) sum_ij k(y_i, y_j): rows and columns touching l combine to
        // 2/m^2 * sum_j dk(y_l, y_j)/dy_l
        for j in 0..m {
            let yj = y_local.row(j);
            let deriv = bank.eval_deriv(sq_dist(yl, yj));
            for (g, (&a, &b)) in g_row.iter_mut().zip(yl.iter().zip(yj)) {
                *g += yy_coef * deriv * 2.0 * (a - b);
            }
        }
        // -(2/nm) sum_i k(x_i, y_l)
        for i in 0..n {
            let xi = x_global.row(i);
            let deriv = bank.eval_deriv(sq_dist(xi, yl));
            for (g, (&a, &b)) in g_row.iter_mut().zip(yl.iter().zip(xi)) {
                *g += xy_coef * deriv * 2.0 * (a - b);
            }
        }
    }
    Ok(grad)
}

/// Mean squared distance between paired rows and its gradient with respect
/// to `y_local`: `(mean_i ||y_i - x_i||^2, 2 (Y - X) / n)`.
pub fn l2_output_penalty(x_global: &Tensor, y_local: &Tensor) -> Result<(f64, Tensor)> {
    if x_global.shape() != y_local.shape() {
        return Err(Error::shape(
            "l2_output_penalty",
            x_global.shape(),
            y_local.shape(),
        ));
    }
    if x_global.is_empty() {
        return Err(Error::EmptyInput("l2_output_penalty needs nonempty inputs".into()));
    }
    let n = x_global.dim(0) as f64;
    let mut grad = y_local.clone();
    let mut value = 0.0;
    for (g, &xv) in grad.data_mut().iter_mut().zip(x_global.data()) {
        let diff = *g - xv;
        value += diff * diff;
        *g = 2.0 * diff / n;
    }
    Ok((value / n, grad))
}

/// Median pairwise Euclidean distance over the pooled rows of `x` and `y`,
/// used as the central RBF bandwidth. Errors when the distances collapse to
/// zero (all points identical); callers fall back to width 1.
pub fn median_heuristic(x: &Tensor, y: &Tensor) -> Result<f64> {
    let (_, _, d) = check_rows(x, y, "median_heuristic")?;
    let mut rows: Vec<&[f64]> = Vec::with_capacity(x.dim(0) + y.dim(0));
    rows.extend((0..x.dim(0)).map(|i| x.row(i)));
    rows.extend((0..y.dim(0)).map(|i| y.row(i)));
    let _ = d;
    if rows.len() < 2 {
        return Err(Error::EmptyInput("median_heuristic needs at least two pooled points".into()));
    }
    let mut dists = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for i in 0..rows.len() {
        for j in (i + 1)..rows.len() {
            dists.push(sq_dist(rows[i], rows[j]).sqrt());
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 1 {
        dists[mid]
    } else {
        0.5 * (dists[mid - 1] + dists[mid])
    };
    if median <= 0.0 {
        return Err(Error::Degenerate(
            "median pairwise distance is zero (identical points)".into(),
        ));
    }
    Ok(median)
}
