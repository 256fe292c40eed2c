//! Small numeric helpers: sample moments, column standardization, and a
//! dense Cholesky for the low-dimensional covariance work in `inference`.
//!
//! Sample variance and covariance use the n-1 divisor throughout.

use ndarray::{Array1, Array2, ArrayView1, ArrayViewMut2};

use crate::error::{Error, Result};

pub fn mean(x: ArrayView1<f64>) -> f64 {
    x.sum() / x.len() as f64
}

/// Sample variance with divisor n-1.
pub fn sample_var(x: ArrayView1<f64>) -> f64 {
    let n = x.len();
    debug_assert!(n >= 2);
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64
}

/// Sample covariance with divisor n-1.
pub fn sample_cov(x: ArrayView1<f64>, y: ArrayView1<f64>) -> f64 {
    let n = x.len();
    debug_assert_eq!(n, y.len());
    debug_assert!(n >= 2);
    let mx = mean(x);
    let my = mean(y);
    x.iter()
        .zip(y.iter())
        .map(|(a, b)| (a - mx) * (b - my))
        .sum::<f64>()
        / (n - 1) as f64
}

/// Pearson correlation; 0.0 when either side has no variance.
pub fn pearson(x: ArrayView1<f64>, y: ArrayView1<f64>) -> f64 {
    let vx = sample_var(x);
    let vy = sample_var(y);
    if vx <= 0.0 || vy <= 0.0 {
        return 0.0;
    }
    sample_cov(x, y) / (vx * vy).sqrt()
}

/// In-place Gram-Schmidt on centered columns, then rescale each column to
/// unit sample variance. Afterwards every column has mean exactly 0 and
/// variance exactly 1 (up to rounding), and all pairwise sample covariances
/// vanish.
///
/// Fails when a column is (numerically) constant or linearly dependent on
/// the preceding ones.
pub fn standardize_orthogonalize(mut theta: ArrayViewMut2<f64>) -> Result<()> {
    let n = theta.nrows();
    let k = theta.ncols();
    if n < 2 {
        return Err(Error::Shape("need at least 2 rows to standardize".into()));
    }
    for col in 0..k {
        let m = mean(theta.column(col).view());
        theta.column_mut(col).mapv_inplace(|v| v - m);
        for prev in 0..col {
            let num: f64 = theta
                .column(col)
                .iter()
                .zip(theta.column(prev).iter())
                .map(|(a, b)| a * b)
                .sum();
            let den: f64 = theta.column(prev).iter().map(|b| b * b).sum();
            let coef = num / den;
            let prev_col = theta.column(prev).to_owned();
            theta
                .column_mut(col)
                .iter_mut()
                .zip(prev_col.iter())
                .for_each(|(a, b)| *a -= coef * b);
        }
        // Re-center: projections on zero-mean columns preserve the mean, but
        // do it anyway to keep the residual mean at machine zero.
        let m2 = mean(theta.column(col).view());
        theta.column_mut(col).mapv_inplace(|v| v - m2);
        let var = theta.column(col).iter().map(|v| v * v).sum::<f64>() / (n - 1) as f64;
        if var <= 1e-24 {
            return Err(Error::DegenerateInit(format!(
                "column {col} has no variance after centering/orthogonalization"
            )));
        }
        let s = var.sqrt();
        theta.column_mut(col).mapv_inplace(|v| v / s);
    }
    Ok(())
}

/// Lower-triangular Cholesky factor of a symmetric matrix. `None` when the
/// matrix is not (numerically) positive definite.
pub fn cholesky(a: &Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let max_diag = (0..n).map(|i| a[[i, i]].abs()).fold(0.0f64, f64::max);
    let tol = 1e-12 * max_diag.max(1e-300);
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[[i, j]];
            for t in 0..j {
                s -= l[[i, t]] * l[[j, t]];
            }
            if i == j {
                if s <= tol {
                    return None;
                }
                l[[i, i]] = s.sqrt();
            } else {
                l[[i, j]] = s / l[[j, j]];
            }
        }
    }
    Some(l)
}

/// Inverse of a symmetric positive-definite matrix via its Cholesky factor.
pub fn spd_inverse(a: &Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    let l = cholesky(a)?;
    // Invert L by forward substitution, then A^-1 = L^-T L^-1.
    let mut linv = Array2::<f64>::zeros((n, n));
    for col in 0..n {
        let mut e = Array1::<f64>::zeros(n);
        e[col] = 1.0;
        for i in 0..n {
            let mut s = e[i];
            for t in 0..i {
                s -= l[[i, t]] * linv[[t, col]];
            }
            linv[[i, col]] = s / l[[i, i]];
        }
    }
    let mut inv = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for t in i.max(j)..n {
                s += linv[[t, i]] * linv[[t, j]];
            }
            inv[[i, j]] = s;
        }
    }
    Some(inv)
}
