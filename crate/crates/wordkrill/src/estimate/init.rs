//! Data-derived starting values.
//!
//! Feature effects start at the logged mean count of each feature and
//! document effects at the logged ratio of each document's mean count to
//! the first document's. The residual of the logged counts (offset by 0.5
//! to cover zeros) is decomposed by SVD; the first K left singular vectors
//! seed theta and the first K right singular vectors, scaled by their
//! singular values, seed beta. Theta is then standardized and
//! orthogonalized so the starting point satisfies the constraints exactly.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2};

use crate::dfm::DocumentFeatureMatrix;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::stats;

/// Offset added to counts before taking logs in the residual decomposition.
const LOG_OFFSET: f64 = 0.5;

/// Compute SVD-based starting values for a K-dimensional fit.
pub fn initial_values(matrix: &DocumentFeatureMatrix, k_dims: usize) -> Result<ModelParams> {
    let n_docs = matrix.n_docs();
    let n_features = matrix.n_features();
    if k_dims < 1 || k_dims >= n_docs.min(n_features) {
        return Err(Error::InvalidConfig(format!(
            "k_dims = {k_dims} must satisfy 1 <= K < min(I, J) = {}",
            n_docs.min(n_features)
        )));
    }

    let psi: Array1<f64> = (0..n_features)
        .map(|j| (matrix.col_total(j) as f64 / n_docs as f64).ln())
        .collect();
    let doc_mean =
        |i: usize| -> f64 { matrix.row_total(i) as f64 / n_features as f64 };
    let base = doc_mean(0);
    let alpha: Array1<f64> = (0..n_docs).map(|i| (doc_mean(i) / base).ln()).collect();

    // Residual of logged counts after removing the fixed effects. The raw
    // residual log(count + c) - alpha - psi carries a systematic component
    // from the curvature of the log at small rates (its leading singular
    // direction tracks document length rather than position), so each cell
    // is centered at the expected logged count under the fixed-effects-only
    // rate instead of at the logged rate itself.
    let mut residual = DMatrix::<f64>::zeros(n_docs, n_features);
    for i in 0..n_docs {
        for j in 0..n_features {
            let logged = (matrix.count(i, j) as f64 + LOG_OFFSET).ln();
            let null_rate = (alpha[i] + psi[j]).exp();
            residual[(i, j)] = logged - expected_logged_count(null_rate);
        }
    }

    let svd = residual.svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let sv = &svd.singular_values;
    let scale = sv[0].max(1.0);
    for k in 0..k_dims {
        if sv[k] <= 1e-10 * scale {
            return Err(Error::DegenerateInit(format!(
                "residual matrix has rank < {} (singular value {} = {:.3e})",
                k_dims,
                k + 1,
                sv[k]
            )));
        }
    }

    let mut theta = Array2::<f64>::zeros((n_docs, k_dims));
    let mut beta = Array2::<f64>::zeros((n_features, k_dims));
    for k in 0..k_dims {
        for i in 0..n_docs {
            theta[[i, k]] = u[(i, k)];
        }
        for j in 0..n_features {
            beta[[j, k]] = v_t[(k, j)] * sv[k];
        }
    }

    stats::standardize_orthogonalize(theta.view_mut()).map_err(|_| {
        Error::DegenerateInit(
            "leading singular vector is constant across documents; \
             the residual carries no document-level signal"
                .into(),
        )
    })?;

    let mut params = ModelParams {
        alpha,
        psi,
        beta,
        theta,
    };

    // Standardizing theta inflates the beta * theta products relative to
    // the SVD approximation; on dense high-count corpora the starting
    // rates can overflow exp(). Damp beta until the starting likelihood is
    // finite so optimizers begin at a usable point.
    for _ in 0..128 {
        if crate::model::log_likelihood(matrix, &params).is_ok() {
            return Ok(params);
        }
        params.beta.mapv_inplace(|b| 0.5 * b);
    }
    Err(Error::DegenerateInit(
        "starting rates overflow even after damping the weight seeds".into(),
    ))
}

/// E[ln(N + c)] for N ~ Poisson(rate), with c the log offset. Evaluated by
/// direct summation over the bulk of the distribution; for large rates the
/// logged rate itself is accurate to O(1/rate).
fn expected_logged_count(rate: f64) -> f64 {
    if rate <= 0.0 {
        return LOG_OFFSET.ln();
    }
    if rate > 50.0 {
        return rate.ln();
    }
    let cutoff = (rate + 12.0 * rate.sqrt() + 25.0).ceil() as u64;
    let mut pmf = (-rate).exp();
    let mut total = pmf * LOG_OFFSET.ln();
    for m in 1..=cutoff {
        pmf *= rate / m as f64;
        total += pmf * (m as f64 + LOG_OFFSET).ln();
    }
    total
}
