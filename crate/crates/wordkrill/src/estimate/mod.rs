//! Fitting: starting values, the constraint band, the conditional and
//! joint estimators, and sign/permutation alignment of fitted positions.

mod auglag;
mod conditional;
mod epsilon;
mod init;
mod lbfgs;

pub use epsilon::{choose_epsilon, EpsilonChoice};
pub use init::initial_values;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dfm::DocumentFeatureMatrix;
use crate::error::{Error, Result};
use crate::model::{
    params_from_json, params_to_json, AnchorPolicy, ConstraintResiduals, FitConfig, ModelParams,
};
use crate::stats;

/// Coefficients with magnitude above this are flagged as divergent
/// (separation-style behaviour, typically features confined to one
/// document).
pub const DIVERGENCE_THRESHOLD: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitMethod {
    /// Alternating per-document / per-feature Poisson regressions (K = 1).
    Conditional,
    /// Joint constrained optimization of all parameters.
    Joint,
}

/// A completed fit.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ModelParams,
    pub method: FitMethod,
    pub converged: bool,
    pub iterations: usize,
    pub final_loglik: f64,
    pub residuals: ConstraintResiduals,
    /// Derived band widths; `None` when fewer than 3 documents make the
    /// quantile formulas inapplicable (conditional fits only).
    pub epsilon: Option<EpsilonChoice>,
    /// The band actually enforced: the override if set, else the derived
    /// final epsilon, else infinity for exact-normalization fits.
    pub eps_applied: f64,
    /// Names of coefficients with |value| > DIVERGENCE_THRESHOLD.
    pub divergent_params: Vec<String>,
}

/// Conditional-maximization fit of the unidimensional model.
pub fn fit_wordfish(matrix: &DocumentFeatureMatrix, config: &FitConfig) -> Result<FitResult> {
    config.validate(matrix)?;
    if config.k_dims != 1 {
        return Err(Error::InvalidConfig(format!(
            "the conditional estimator is unidimensional; got k_dims = {}",
            config.k_dims
        )));
    }
    let init = initial_values(matrix, 1)?;
    finish_conditional(matrix, init, config, &config.anchor)
}

/// Joint epsilon-constrained maximum-likelihood fit in K dimensions.
pub fn fit_wordkrill(matrix: &DocumentFeatureMatrix, config: &FitConfig) -> Result<FitResult> {
    let init = initial_values(matrix, config.k_dims)?;
    fit_wordkrill_from(matrix, init, config)
}

/// Conditional fit from explicit starting values (bootstrap warm starts).
pub(crate) fn refit_conditional(
    matrix: &DocumentFeatureMatrix,
    start: ModelParams,
    config: &FitConfig,
) -> Result<FitResult> {
    config.validate(matrix)?;
    if start.k_dims() != 1 {
        return Err(Error::InvalidConfig(
            "the conditional estimator is unidimensional".into(),
        ));
    }
    start.validate_for(matrix)?;
    finish_conditional(matrix, start, config, &AnchorPolicy::InitCorrelation)
}

/// Run the conditional loop from `start` and assemble the result.
fn finish_conditional(
    matrix: &DocumentFeatureMatrix,
    start: ModelParams,
    config: &FitConfig,
    anchor: &AnchorPolicy,
) -> Result<FitResult> {
    let start_theta = start.theta.clone();
    let out = conditional::fit_conditional(matrix, start, config)?;
    let epsilon = if matrix.n_docs() >= 3 {
        Some(choose_epsilon(matrix.n_docs(), config.sig_level)?)
    } else {
        None
    };
    let eps_applied = config
        .epsilon_override
        .or(epsilon.map(|e| e.eps_final))
        .unwrap_or(f64::INFINITY);
    let mut params = out.params;
    apply_anchor(matrix, &mut params, &start_theta, anchor)?;
    let residuals = params.constraint_residuals();
    let converged = out.converged && residuals.max_abs() <= eps_applied;
    Ok(FitResult {
        divergent_params: divergent_names(matrix, &params),
        final_loglik: out.final_core_ll - matrix.log_factorial_sum(),
        method: FitMethod::Conditional,
        converged,
        iterations: out.iterations,
        residuals,
        epsilon,
        eps_applied,
        params,
    })
}

/// Joint fit from explicit starting values (used by the bootstrap to warm
/// start replicate fits).
pub fn fit_wordkrill_from(
    matrix: &DocumentFeatureMatrix,
    start: ModelParams,
    config: &FitConfig,
) -> Result<FitResult> {
    config.validate(matrix)?;
    if start.k_dims() != config.k_dims {
        return Err(Error::Shape(format!(
            "start has {} dimensions, config asks for {}",
            start.k_dims(),
            config.k_dims
        )));
    }
    start.validate_for(matrix)?;

    let epsilon = if matrix.n_docs() >= 3 {
        Some(choose_epsilon(matrix.n_docs(), config.sig_level)?)
    } else {
        None
    };
    let eps_applied = match (config.epsilon_override, epsilon) {
        (Some(e), _) => e,
        (None, Some(d)) => d.eps_final,
        (None, None) => {
            return Err(Error::InvalidConfig(
                "joint fit needs at least 3 documents unless an epsilon override is given"
                    .into(),
            ))
        }
    };

    let init_theta = start.theta.clone();
    let out = auglag::fit_joint(matrix, start, config, eps_applied);

    let mut params = out.params;
    canonicalize(&mut params, &init_theta);
    apply_anchor(matrix, &mut params, &init_theta, &config.anchor)?;
    let residuals = params.constraint_residuals();
    Ok(FitResult {
        divergent_params: divergent_names(matrix, &params),
        final_loglik: out.core_ll - matrix.log_factorial_sum(),
        method: FitMethod::Joint,
        converged: out.converged,
        iterations: out.iterations,
        residuals,
        epsilon,
        eps_applied,
        params,
    })
}

/// Rewrite fitted parameters as the canonical representative of their
/// likelihood-equivalence class. The rate matrix admits the
/// reparametrization theta -> theta A, beta -> beta A^-T for any invertible
/// A (plus a translation absorbed by psi), so a fit is only determined up
/// to that group; this picks the member with sample mean exactly 0 and
/// covariance exactly the identity, oriented by orthogonal Procrustes
/// toward `reference` (the initialization positions, whose dimensions are
/// ordered by singular value). Every Poisson rate, and hence the
/// log-likelihood, is unchanged.
///
/// Returns false (leaving the parameters alone) when the position columns
/// are numerically collinear and no such representative exists.
pub(crate) fn canonicalize(params: &mut ModelParams, reference: &Array2<f64>) -> bool {
    let k = params.k_dims();
    let n_docs = params.n_docs();
    let n_features = params.n_features();

    // Absorb the column means into psi: theta beta^T = theta_c beta^T + 1 m^T beta^T.
    let means: Vec<f64> = (0..k).map(|d| stats::mean(params.theta.column(d))).collect();
    for j in 0..n_features {
        let shift: f64 = (0..k).map(|d| params.beta[[j, d]] * means[d]).sum();
        params.psi[j] += shift;
    }
    for (d, m) in means.iter().enumerate() {
        params.theta.column_mut(d).mapv_inplace(|v| v - m);
    }

    // Whiten: theta' = theta_c L^-T, beta' = beta L^T with L the Cholesky
    // factor of the sample covariance; then cov(theta') is exactly I.
    let mut cov = nalgebra::DMatrix::<f64>::zeros(k, k);
    for a in 0..k {
        for b in 0..k {
            let s: f64 = (0..n_docs)
                .map(|i| params.theta[[i, a]] * params.theta[[i, b]])
                .sum();
            cov[(a, b)] = s / (n_docs as f64 - 1.0);
        }
    }
    let Some(chol) = nalgebra::Cholesky::new(cov) else {
        return false;
    };
    let l = chol.l();
    let l_inv_t = l
        .clone()
        .try_inverse()
        .expect("Cholesky factor is invertible")
        .transpose();
    let theta_new = matmul(&params.theta, &l_inv_t);
    let beta_new = matmul(&params.beta, &l.transpose());

    // Orthogonal Procrustes: the rotation W minimizing
    // ||theta' W - reference||_F keeps the whitened moments intact and
    // undoes any in-plane spin the whitening or the optimizer introduced.
    let (theta_final, beta_final) = if k >= 2 {
        let mut cross = nalgebra::DMatrix::<f64>::zeros(k, k);
        for a in 0..k {
            for b in 0..k {
                let s: f64 = (0..n_docs)
                    .map(|i| theta_new[[i, a]] * reference[[i, b]])
                    .sum();
                cross[(a, b)] = s;
            }
        }
        let svd = cross.svd(true, true);
        let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
            return false;
        };
        let w = u * v_t;
        (matmul(&theta_new, &w), matmul(&beta_new, &w))
    } else {
        (theta_new, beta_new)
    };

    params.theta = theta_final;
    params.beta = beta_final;
    true
}

fn matmul(m: &Array2<f64>, t: &nalgebra::DMatrix<f64>) -> Array2<f64> {
    let (rows, k) = (m.nrows(), m.ncols());
    Array2::from_shape_fn((rows, k), |(r, c)| {
        (0..k).map(|d| m[[r, d]] * t[(d, c)]).sum()
    })
}

/// Resolve per-dimension signs: by default each fitted column is flipped to
/// correlate positively with its initialization column; explicit document
/// anchors override.
fn apply_anchor(
    matrix: &DocumentFeatureMatrix,
    params: &mut ModelParams,
    init_theta: &Array2<f64>,
    policy: &AnchorPolicy,
) -> Result<()> {
    let k = params.k_dims();
    match policy {
        AnchorPolicy::InitCorrelation => {
            for d in 0..k {
                let r = stats::pearson(params.theta.column(d), init_theta.column(d));
                if r < 0.0 {
                    flip_dimension(params, d);
                }
            }
        }
        AnchorPolicy::Docs(pairs) => {
            if pairs.len() != k {
                return Err(Error::InvalidConfig(format!(
                    "anchor policy has {} pairs for {k} dimensions",
                    pairs.len()
                )));
            }
            for (d, pair) in pairs.iter().enumerate() {
                let lo = doc_index(matrix, &pair.doc_low)?;
                let hi = doc_index(matrix, &pair.doc_high)?;
                if params.theta[[lo, d]] > params.theta[[hi, d]] {
                    flip_dimension(params, d);
                }
            }
        }
    }
    Ok(())
}

fn doc_index(matrix: &DocumentFeatureMatrix, id: &str) -> Result<usize> {
    matrix
        .doc_ids()
        .iter()
        .position(|d| d == id)
        .ok_or_else(|| Error::InvalidConfig(format!("anchor document `{id}` not in matrix")))
}

fn flip_dimension(params: &mut ModelParams, d: usize) {
    params.theta.column_mut(d).mapv_inplace(|v| -v);
    params.beta.column_mut(d).mapv_inplace(|v| -v);
}

fn divergent_names(matrix: &DocumentFeatureMatrix, params: &ModelParams) -> Vec<String> {
    let mut names = Vec::new();
    for (i, v) in params.alpha.iter().enumerate() {
        if v.abs() > DIVERGENCE_THRESHOLD {
            names.push(format!("alpha[{}]", matrix.doc_ids()[i]));
        }
    }
    for (j, v) in params.psi.iter().enumerate() {
        if v.abs() > DIVERGENCE_THRESHOLD {
            names.push(format!("psi[{}]", matrix.feature_ids()[j]));
        }
    }
    for j in 0..params.n_features() {
        for d in 0..params.k_dims() {
            if params.beta[[j, d]].abs() > DIVERGENCE_THRESHOLD {
                names.push(format!("beta[{}][{}]", matrix.feature_ids()[j], d + 1));
            }
        }
    }
    for i in 0..params.n_docs() {
        for d in 0..params.k_dims() {
            if params.theta[[i, d]].abs() > DIVERGENCE_THRESHOLD {
                names.push(format!("theta[{}][{}]", matrix.doc_ids()[i], d + 1));
            }
        }
    }
    names
}

// ---------------------------------------------------------------------------
// Sign/permutation alignment
// ---------------------------------------------------------------------------

/// A signed permutation mapping candidate columns onto reference columns:
/// aligned column d = sign[d] * candidate column perm[d].
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub perm: Vec<usize>,
    pub signs: Vec<f64>,
    /// Correlation of each aligned column with its reference column.
    pub corr: Vec<f64>,
}

/// Find the signed permutation of candidate columns maximizing the total
/// absolute correlation with the reference columns. Exhaustive over the
/// 2^K * K! candidates for K <= 8 (the factor of 2 resolves per column via
/// the correlation sign), greedy beyond that.
pub fn signed_permutation(reference: &Array2<f64>, candidate: &Array2<f64>) -> Alignment {
    let k = reference.ncols();
    assert_eq!(k, candidate.ncols(), "dimension count mismatch");
    assert_eq!(
        reference.nrows(),
        candidate.nrows(),
        "document count mismatch"
    );

    // |corr| between every candidate/reference column pair.
    let mut corr = Array2::<f64>::zeros((k, k));
    for c in 0..k {
        for r in 0..k {
            corr[[c, r]] = stats::pearson(candidate.column(c), reference.column(r));
        }
    }

    let perm = if k <= 8 {
        best_assignment_exhaustive(&corr)
    } else {
        best_assignment_greedy(&corr)
    };

    let mut signs = vec![1.0; k];
    let mut diag = vec![0.0; k];
    for (r, &c) in perm.iter().enumerate() {
        let v = corr[[c, r]];
        signs[r] = if v < 0.0 { -1.0 } else { 1.0 };
        diag[r] = v.abs();
    }
    Alignment {
        perm,
        signs,
        corr: diag,
    }
}

/// perm[r] = candidate column assigned to reference column r.
fn best_assignment_exhaustive(corr: &Array2<f64>) -> Vec<usize> {
    let k = corr.nrows();
    let mut best: Vec<usize> = (0..k).collect();
    let mut best_score = f64::NEG_INFINITY;
    let mut current: Vec<usize> = (0..k).collect();
    permute(&mut current, 0, &mut |p: &[usize]| {
        let score: f64 = p.iter().enumerate().map(|(r, &c)| corr[[c, r]].abs()).sum();
        if score > best_score {
            best_score = score;
            best = p.to_vec();
        }
    });
    best
}

fn permute(items: &mut Vec<usize>, start: usize, visit: &mut dyn FnMut(&[usize])) {
    if start == items.len() {
        visit(items);
        return;
    }
    for idx in start..items.len() {
        items.swap(start, idx);
        permute(items, start + 1, visit);
        items.swap(start, idx);
    }
}

fn best_assignment_greedy(corr: &Array2<f64>) -> Vec<usize> {
    let k = corr.nrows();
    let mut perm = vec![usize::MAX; k];
    let mut used = vec![false; k];
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(k * k);
    for c in 0..k {
        for r in 0..k {
            pairs.push((corr[[c, r]].abs(), c, r));
        }
    }
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    for (_, c, r) in pairs {
        if perm[r] == usize::MAX && !used[c] {
            perm[r] = c;
            used[c] = true;
        }
    }
    perm
}

/// Apply the best signed permutation of `candidate`'s dimensions so they
/// line up with `reference` (theta and beta columns move together); the
/// log-likelihood is unchanged. Residuals are recomputed for the reordered
/// dimensions; divergence flags keep the names they were given at fit
/// time, i.e. they refer to the pre-alignment dimension order.
pub fn align(reference: &Array2<f64>, candidate: FitResult) -> FitResult {
    let alignment = signed_permutation(reference, &candidate.params.theta);
    let mut out = candidate;
    out.params = apply_alignment(&out.params, &alignment);
    out.residuals = out.params.constraint_residuals();
    out
}

pub(crate) fn apply_alignment(params: &ModelParams, alignment: &Alignment) -> ModelParams {
    let k = params.k_dims();
    let mut theta = Array2::<f64>::zeros((params.n_docs(), k));
    let mut beta = Array2::<f64>::zeros((params.n_features(), k));
    for (r, &c) in alignment.perm.iter().enumerate() {
        let s = alignment.signs[r];
        theta
            .column_mut(r)
            .assign(&params.theta.column(c).mapv(|v| s * v));
        beta.column_mut(r)
            .assign(&params.beta.column(c).mapv(|v| s * v));
    }
    ModelParams {
        alpha: params.alpha.clone(),
        psi: params.psi.clone(),
        beta,
        theta,
    }
}

// ---------------------------------------------------------------------------
// FitResult serialization ("wordkrill-fit-v1")
// ---------------------------------------------------------------------------

pub const FIT_SCHEMA_VERSION: &str = "wordkrill-fit-v1";

#[derive(Serialize, Deserialize)]
struct FitJson {
    version: String,
    method: FitMethod,
    converged: bool,
    iterations: usize,
    final_loglik: f64,
    residuals: ConstraintResiduals,
    epsilon: Option<EpsilonChoice>,
    eps_applied: Option<f64>,
    divergent_params: Vec<String>,
    params: serde_json::Value,
}

pub fn fit_to_json(fit: &FitResult, doc_ids: &[String], feature_ids: &[String]) -> serde_json::Value {
    let body = FitJson {
        version: FIT_SCHEMA_VERSION.to_string(),
        method: fit.method,
        converged: fit.converged,
        iterations: fit.iterations,
        final_loglik: fit.final_loglik,
        residuals: fit.residuals.clone(),
        epsilon: fit.epsilon,
        eps_applied: fit.eps_applied.is_finite().then_some(fit.eps_applied),
        divergent_params: fit.divergent_params.clone(),
        params: params_to_json(&fit.params, doc_ids, feature_ids),
    };
    serde_json::to_value(body).expect("fit serialize")
}

pub fn fit_from_json(value: &serde_json::Value) -> Result<(FitResult, Vec<String>, Vec<String>)> {
    let body: FitJson = serde_json::from_value(value.clone()).map_err(|e| Error::Json {
        context: "fit".into(),
        message: e.to_string(),
    })?;
    if body.version != FIT_SCHEMA_VERSION {
        return Err(Error::Json {
            context: "fit".into(),
            message: format!(
                "unsupported version `{}`, expected `{FIT_SCHEMA_VERSION}`",
                body.version
            ),
        });
    }
    let (params, doc_ids, feature_ids) = params_from_json(&body.params)?;
    Ok((
        FitResult {
            params,
            method: body.method,
            converged: body.converged,
            iterations: body.iterations,
            final_loglik: body.final_loglik,
            residuals: body.residuals,
            epsilon: body.epsilon,
            eps_applied: body.eps_applied.unwrap_or(f64::INFINITY),
            divergent_params: body.divergent_params,
        },
        doc_ids,
        feature_ids,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn standardized(cols: Vec<Vec<f64>>) -> Array2<f64> {
        let n = cols[0].len();
        let k = cols.len();
        let mut t = Array2::<f64>::zeros((n, k));
        for (d, col) in cols.iter().enumerate() {
            for (i, v) in col.iter().enumerate() {
                t[[i, d]] = *v;
            }
        }
        stats::standardize_orthogonalize(t.view_mut()).unwrap();
        t
    }

    #[test]
    fn align_recovers_planted_signed_permutation() {
        let reference = standardized(vec![
            vec![0.3, -1.0, 0.7, 1.4, -0.8, 0.1],
            vec![1.2, 0.4, -0.9, 0.2, -1.5, 0.7],
            vec![-0.2, 0.9, 1.1, -0.6, 0.3, -1.2],
        ]);
        // Candidate = reference with columns (2, 0, 1) and a sign flip on
        // the middle output column.
        let mut candidate = Array2::<f64>::zeros(reference.raw_dim());
        candidate.column_mut(0).assign(&reference.column(2));
        candidate
            .column_mut(1)
            .assign(&reference.column(0).mapv(|v| -v));
        candidate.column_mut(2).assign(&reference.column(1));

        let a = signed_permutation(&reference, &candidate);
        assert_eq!(a.perm, vec![1, 2, 0]);
        assert_eq!(a.signs, vec![-1.0, 1.0, 1.0]);
        for r in a.corr {
            assert!((r - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn alignment_diagonal_is_nonnegative_for_random_inputs() {
        let reference = standardized(vec![
            vec![0.4, -0.8, 1.3, -0.2, 0.9, -1.6],
            vec![-0.6, 1.1, 0.2, 0.8, -1.3, 0.4],
        ]);
        let candidate = standardized(vec![
            vec![1.0, 0.3, -0.5, -1.2, 0.8, 0.1],
            vec![0.2, -0.9, 0.4, 1.5, -0.3, -0.7],
        ]);
        let a = signed_permutation(&reference, &candidate);
        for (r, &c) in a.perm.iter().enumerate() {
            let aligned = candidate.column(c).mapv(|v| a.signs[r] * v);
            let rho = stats::pearson(aligned.view(), reference.column(r));
            assert!(rho >= 0.0);
        }
    }

    #[test]
    fn k1_alignment_resolves_sign_only() {
        let reference = standardized(vec![vec![1.0, -1.0, 0.5, -0.5]]);
        let candidate = standardized(vec![vec![-1.0, 1.0, -0.5, 0.5]]);
        let a = signed_permutation(&reference, &candidate);
        assert_eq!(a.perm, vec![0]);
        assert_eq!(a.signs, vec![-1.0]);
    }

    #[test]
    fn align_preserves_loglik_and_permutes_params() {
        let reference = standardized(vec![
            vec![0.3, -1.0, 0.7, 1.4, -0.8, 0.1],
            vec![1.2, 0.4, -0.9, 0.2, -1.5, 0.7],
        ]);
        let theta = {
            let mut t = Array2::<f64>::zeros(reference.raw_dim());
            t.column_mut(0).assign(&reference.column(1).mapv(|v| -v));
            t.column_mut(1).assign(&reference.column(0));
            t
        };
        let fit = FitResult {
            params: ModelParams {
                alpha: array![0.0, 0.1, 0.2, 0.3, -0.1, -0.2],
                psi: array![0.5, -0.5],
                beta: array![[1.0, 2.0], [3.0, 4.0]],
                theta,
            },
            method: FitMethod::Joint,
            converged: true,
            iterations: 5,
            final_loglik: -12.5,
            residuals: ConstraintResiduals {
                mean: vec![0.0, 0.0],
                var_dev: vec![0.0, 0.0],
                cov: vec![(0, 1, 0.0)],
            },
            epsilon: None,
            eps_applied: 0.5,
            divergent_params: vec![],
        };
        let aligned = align(&reference, fit);
        assert_eq!(aligned.final_loglik, -12.5);
        // Column 0 of the aligned result should be the old column 1.
        assert_eq!(aligned.params.beta[[0, 0]], 2.0);
        assert_eq!(aligned.params.beta[[0, 1]], -1.0);
        let rho = stats::pearson(aligned.params.theta.column(0), reference.column(0));
        assert!(rho > 0.999);
    }
}
