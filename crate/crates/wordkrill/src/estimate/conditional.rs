//! The unidimensional conditional-maximization estimator.
//!
//! Each outer iteration runs three steps: per-document Poisson regressions
//! for (alpha_i, theta_i) holding the feature parameters fixed, a
//! normalization of theta to sample mean 0 and variance 1, and per-feature
//! Poisson regressions for (psi_j, beta_j) holding the document parameters
//! fixed. The normalization applies the compensating transform
//! `psi_j += beta_j * m`, `beta_j *= s`, which leaves every rate unchanged,
//! so the log-likelihood is non-decreasing across half-steps. alpha of the
//! first document is pinned to 0 to remove the translation degeneracy.


use rayon::prelude::*;

use crate::dfm::DocumentFeatureMatrix;
use crate::error::Result;
use crate::model::{log_likelihood_core, FitConfig, ModelParams};
use crate::stats;

const NEWTON_MAX_ITERS: usize = 50;
const NEWTON_HALVINGS: usize = 30;

pub(crate) struct ConditionalOutcome {
    pub params: ModelParams,
    pub converged: bool,
    pub iterations: usize,
    pub final_core_ll: f64,
}

/// Run the conditional loop from the given starting values (K = 1).
pub(crate) fn fit_conditional(
    matrix: &DocumentFeatureMatrix,
    start: ModelParams,
    config: &FitConfig,
) -> Result<ConditionalOutcome> {
    debug_assert_eq!(start.k_dims(), 1);
    let n_docs = matrix.n_docs();
    let n_features = matrix.n_features();

    let mut params = start;
    // Pin alpha_1 = 0, folding the shift into psi so rates are unchanged.
    let shift = params.alpha[0];
    if shift != 0.0 {
        params.alpha.mapv_inplace(|v| v - shift);
        params.psi.mapv_inplace(|v| v + shift);
    }
    let mut ll_prev = log_likelihood_core(matrix, &params);
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..config.max_iters {
        iterations += 1;

        // Document step.
        let beta: Vec<f64> = params.beta.column(0).to_vec();
        let psi: Vec<f64> = params.psi.to_vec();
        let doc_updates: Vec<(f64, f64)> = (0..n_docs)
            .into_par_iter()
            .map(|i| {
                refine_document(
                    matrix,
                    &psi,
                    &beta,
                    i,
                    params.alpha[i],
                    params.theta[[i, 0]],
                    i == 0,
                )
            })
            .collect();
        for (i, (a, t)) in doc_updates.into_iter().enumerate() {
            params.alpha[i] = a;
            params.theta[[i, 0]] = t;
        }
        #[cfg(debug_assertions)]
        {
            let ll_half = log_likelihood_core(matrix, &params);
            debug_assert!(
                ll_half >= ll_prev - 1e-9 * (1.0 + ll_prev.abs()),
                "document half-step decreased the conditional likelihood"
            );
        }

        // Normalization with exact compensation.
        let m = stats::mean(params.theta.column(0));
        let var = stats::sample_var(params.theta.column(0));
        if var > 1e-16 {
            let s = var.sqrt();
            for j in 0..n_features {
                params.psi[j] += params.beta[[j, 0]] * m;
                params.beta[[j, 0]] *= s;
            }
            params
                .theta
                .column_mut(0)
                .mapv_inplace(|v| (v - m) / s);
        }

        // Feature step.
        let alpha: Vec<f64> = params.alpha.to_vec();
        let theta: Vec<f64> = params.theta.column(0).to_vec();
        #[cfg(debug_assertions)]
        let ll_before_features = log_likelihood_core(matrix, &params);
        let feat_updates: Vec<(f64, f64)> = (0..n_features)
            .into_par_iter()
            .map(|j| {
                refine_feature(
                    matrix,
                    &alpha,
                    &theta,
                    j,
                    params.psi[j],
                    params.beta[[j, 0]],
                )
            })
            .collect();
        for (j, (p, b)) in feat_updates.into_iter().enumerate() {
            params.psi[j] = p;
            params.beta[[j, 0]] = b;
        }

        let ll = log_likelihood_core(matrix, &params);
        #[cfg(debug_assertions)]
        debug_assert!(
            ll >= ll_before_features - 1e-9 * (1.0 + ll_before_features.abs()),
            "feature half-step decreased the conditional likelihood"
        );

        let rel_change = (ll - ll_prev).abs() / (1.0 + ll_prev.abs());
        ll_prev = ll;
        if rel_change < config.grad_tol {
            converged = true;
            break;
        }
    }

    Ok(ConditionalOutcome {
        params,
        converged,
        iterations,
        final_core_ll: ll_prev,
    })
}

/// Newton refinement of (alpha_i, theta_i) for one document, with psi and
/// beta fixed. When `pin_alpha` is set only theta moves.
fn refine_document(
    matrix: &DocumentFeatureMatrix,
    psi: &[f64],
    beta: &[f64],
    i: usize,
    alpha0: f64,
    theta0: f64,
    pin_alpha: bool,
) -> (f64, f64) {
    let row = matrix.row(i);
    let obj = |a: f64, t: f64| -> f64 {
        let mut ll = 0.0;
        let mut sparse = row.iter().peekable();
        for j in 0..psi.len() {
            let eta = a + psi[j] + beta[j] * t;
            ll -= eta.exp();
            if let Some(&&(jj, c)) = sparse.peek() {
                if jj == j {
                    ll += c as f64 * eta;
                    sparse.next();
                }
            }
        }
        ll
    };

    let mut a = alpha0;
    let mut t = theta0;
    let mut f = obj(a, t);
    let tol = 1e-10 * (1.0 + matrix.row_total(i) as f64);

    for _ in 0..NEWTON_MAX_ITERS {
        // Gradient and Hessian of the conditional likelihood.
        let mut g_a = 0.0;
        let mut g_t = 0.0;
        let mut h_aa = 0.0;
        let mut h_at = 0.0;
        let mut h_tt = 0.0;
        let mut sparse = row.iter().peekable();
        for j in 0..psi.len() {
            let lambda = (a + psi[j] + beta[j] * t).exp();
            let mut count = 0.0;
            if let Some(&&(jj, c)) = sparse.peek() {
                if jj == j {
                    count = c as f64;
                    sparse.next();
                }
            }
            let resid = count - lambda;
            g_a += resid;
            g_t += beta[j] * resid;
            h_aa += lambda;
            h_at += beta[j] * lambda;
            h_tt += beta[j] * beta[j] * lambda;
        }

        let (da, dt) = if pin_alpha {
            if h_tt <= 1e-300 {
                break;
            }
            (0.0, g_t / h_tt)
        } else {
            let det = h_aa * h_tt - h_at * h_at;
            if det <= 1e-300 {
                break;
            }
            ((h_tt * g_a - h_at * g_t) / det, (h_aa * g_t - h_at * g_a) / det)
        };

        let grad_norm = if pin_alpha { g_t.abs() } else { g_a.abs().max(g_t.abs()) };
        if grad_norm <= tol {
            break;
        }

        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..NEWTON_HALVINGS {
            let na = a + step * da;
            let nt = t + step * dt;
            let nf = obj(na, nt);
            if nf.is_finite() && nf >= f {
                a = na;
                t = nt;
                f = nf;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    (a, t)
}

/// Newton refinement of (psi_j, beta_j) for one feature, with alpha and
/// theta fixed.
fn refine_feature(
    matrix: &DocumentFeatureMatrix,
    alpha: &[f64],
    theta: &[f64],
    j: usize,
    psi0: f64,
    beta0: f64,
) -> (f64, f64) {
    let col = matrix.col(j);
    let obj = |p: f64, b: f64| -> f64 {
        let mut ll = 0.0;
        let mut sparse = col.iter().peekable();
        for i in 0..alpha.len() {
            let eta = alpha[i] + p + b * theta[i];
            ll -= eta.exp();
            if let Some(&&(ii, c)) = sparse.peek() {
                if ii == i {
                    ll += c as f64 * eta;
                    sparse.next();
                }
            }
        }
        ll
    };

    let mut p = psi0;
    let mut b = beta0;
    let mut f = obj(p, b);
    let tol = 1e-10 * (1.0 + matrix.col_total(j) as f64);

    for _ in 0..NEWTON_MAX_ITERS {
        let mut g_p = 0.0;
        let mut g_b = 0.0;
        let mut h_pp = 0.0;
        let mut h_pb = 0.0;
        let mut h_bb = 0.0;
        let mut sparse = col.iter().peekable();
        for i in 0..alpha.len() {
            let lambda = (alpha[i] + p + b * theta[i]).exp();
            let mut count = 0.0;
            if let Some(&&(ii, c)) = sparse.peek() {
                if ii == i {
                    count = c as f64;
                    sparse.next();
                }
            }
            let resid = count - lambda;
            g_p += resid;
            g_b += theta[i] * resid;
            h_pp += lambda;
            h_pb += theta[i] * lambda;
            h_bb += theta[i] * theta[i] * lambda;
        }

        let det = h_pp * h_bb - h_pb * h_pb;
        if det <= 1e-300 {
            break;
        }
        if g_p.abs().max(g_b.abs()) <= tol {
            break;
        }
        let dp = (h_bb * g_p - h_pb * g_b) / det;
        let db = (h_pp * g_b - h_pb * g_p) / det;

        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..NEWTON_HALVINGS {
            let np = p + step * dp;
            let nb = b + step * db;
            let nf = obj(np, nb);
            if nf.is_finite() && nf >= f {
                p = np;
                b = nb;
                f = nf;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    (p, b)
}

#[allow(unused_imports)]
use crate::model::log_likelihood; // referenced by docs

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimate::initial_values;

    #[test]
    fn mirrored_documents_scale_to_half_sqrt2() {
        // Two documents with mirrored count patterns: the fitted positions
        // are symmetric around 0 and normalization to unit sample variance
        // (divisor n-1) puts them at +/- 1/sqrt(2).
        let m = DocumentFeatureMatrix::new(
            vec!["a".into(), "b".into()],
            vec!["x".into(), "y".into()],
            vec![(0, 0, 20), (0, 1, 2), (1, 0, 2), (1, 1, 20)],
        )
        .unwrap();
        let start = initial_values(&m, 1).unwrap();
        let config = FitConfig::default();
        let out = fit_conditional(&m, start, &config).unwrap();
        assert!(out.converged);
        let t0 = out.params.theta[[0, 0]];
        let t1 = out.params.theta[[1, 0]];
        let expect = 1.0 / 2.0f64.sqrt();
        assert!((t0.abs() - expect).abs() < 1e-9, "got {t0}");
        assert!((t1.abs() - expect).abs() < 1e-9);
        assert!(t0 * t1 < 0.0);
    }

    #[test]
    fn refit_from_estimates_converges_immediately() {
        let m = DocumentFeatureMatrix::new(
            (0..5).map(|i| format!("d{i}")).collect(),
            (0..6).map(|j| format!("w{j}")).collect(),
            (0..5)
                .flat_map(|i| {
                    (0..6).map(move |j| (i, j, 1 + ((i * 2 + j * 3 + i * j) % 5) as u64))
                })
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let config = FitConfig::default();
        let start = initial_values(&m, 1).unwrap();
        let first = fit_conditional(&m, start, &config).unwrap();
        assert!(first.converged);
        let second = fit_conditional(&m, first.params.clone(), &config).unwrap();
        assert!(second.converged);
        assert!(second.iterations <= 2);
        let rel = (second.final_core_ll - first.final_core_ll).abs()
            / (1.0 + first.final_core_ll.abs());
        assert!(rel < 1e-8, "relative change {rel}");
    }
}
