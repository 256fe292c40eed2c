//! Model parameters, the Poisson log-likelihood, and its analytic gradients.
//!
//! The rate for document i and feature j is
//! `log lambda_ij = alpha_i + psi_j + sum_k beta_jk * theta_ik`;
//! the unidimensional model is the K = 1 special case. Likelihood and
//! gradient sums run in parallel over fixed-size document chunks with an
//! ordered combine, so results do not depend on the number of threads.

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dfm::DocumentFeatureMatrix;
use crate::error::{Error, Result};
use crate::stats;

/// Documents per parallel work unit. Fixed so that floating-point reduction
/// order is independent of thread count.
const DOC_CHUNK: usize = 32;

/// Full parameter set of a K-dimensional fit.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Document fixed effects, length I.
    pub alpha: Array1<f64>,
    /// Feature fixed effects, length J.
    pub psi: Array1<f64>,
    /// Feature weights, J x K.
    pub beta: Array2<f64>,
    /// Document positions, I x K.
    pub theta: Array2<f64>,
}

impl ModelParams {
    pub fn zeros(n_docs: usize, n_features: usize, k_dims: usize) -> Self {
        Self {
            alpha: Array1::zeros(n_docs),
            psi: Array1::zeros(n_features),
            beta: Array2::zeros((n_features, k_dims)),
            theta: Array2::zeros((n_docs, k_dims)),
        }
    }

    pub fn n_docs(&self) -> usize {
        self.alpha.len()
    }

    pub fn n_features(&self) -> usize {
        self.psi.len()
    }

    pub fn k_dims(&self) -> usize {
        self.theta.ncols()
    }

    pub fn validate_for(&self, matrix: &DocumentFeatureMatrix) -> Result<()> {
        let (i, j, k) = (self.n_docs(), self.n_features(), self.k_dims());
        if i != matrix.n_docs() || j != matrix.n_features() {
            return Err(Error::Shape(format!(
                "params are {i} x {j}, matrix is {} x {}",
                matrix.n_docs(),
                matrix.n_features()
            )));
        }
        if self.beta.nrows() != j || self.beta.ncols() != k || self.theta.nrows() != i {
            return Err(Error::Shape("inconsistent beta/theta shapes".into()));
        }
        if !self.all_finite() {
            return Err(Error::Overflow("non-finite parameter value".into()));
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.alpha.iter().all(|v| v.is_finite())
            && self.psi.iter().all(|v| v.is_finite())
            && self.beta.iter().all(|v| v.is_finite())
            && self.theta.iter().all(|v| v.is_finite())
    }

    /// Residuals of the identification constraints on theta: per-dimension
    /// sample mean, per-dimension |variance - 1|, per-pair |covariance|.
    pub fn constraint_residuals(&self) -> ConstraintResiduals {
        let k = self.k_dims();
        let mean: Vec<f64> = (0..k)
            .map(|d| stats::mean(self.theta.column(d)))
            .collect();
        let var_dev: Vec<f64> = (0..k)
            .map(|d| (stats::sample_var(self.theta.column(d)) - 1.0).abs())
            .collect();
        let mut cov = Vec::new();
        for a in 0..k {
            for b in (a + 1)..k {
                cov.push((
                    a,
                    b,
                    stats::sample_cov(self.theta.column(a), self.theta.column(b)),
                ));
            }
        }
        ConstraintResiduals { mean, var_dev, cov }
    }
}

/// Signed constraint residuals reported with a fit.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ConstraintResiduals {
    /// Sample mean of each theta column.
    pub mean: Vec<f64>,
    /// |sample variance - 1| of each theta column.
    pub var_dev: Vec<f64>,
    /// Sample covariance of each column pair (k, l), k < l.
    pub cov: Vec<(usize, usize, f64)>,
}

impl ConstraintResiduals {
    pub fn max_abs(&self) -> f64 {
        let m = self.mean.iter().map(|v| v.abs()).fold(0.0f64, f64::max);
        let v = self.var_dev.iter().cloned().fold(0.0f64, f64::max);
        let c = self.cov.iter().map(|(_, _, v)| v.abs()).fold(0.0f64, f64::max);
        m.max(v).max(c)
    }
}

/// Sign anchoring for one latent dimension: require
/// `theta[doc_low] < theta[doc_high]`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AnchorPair {
    pub doc_low: String,
    pub doc_high: String,
}

/// How a fit resolves sign indeterminacy per dimension.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub enum AnchorPolicy {
    /// Fix signs so each fitted theta column correlates positively with its
    /// initialization column.
    #[default]
    InitCorrelation,
    /// One (doc_low, doc_high) pair per dimension.
    Docs(Vec<AnchorPair>),
}

/// Fit settings shared by the conditional and joint estimators.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FitConfig {
    pub k_dims: usize,
    /// Significance level used to derive the constraint band epsilon.
    pub sig_level: f64,
    /// Replaces the derived epsilon when set.
    pub epsilon_override: Option<f64>,
    /// Outer iteration cap.
    pub max_iters: usize,
    /// Relative log-likelihood improvement defining convergence.
    pub grad_tol: f64,
    pub seed: u64,
    pub anchor: AnchorPolicy,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            k_dims: 1,
            sig_level: 0.05,
            epsilon_override: None,
            max_iters: 500,
            grad_tol: 1e-8,
            seed: 0,
            anchor: AnchorPolicy::InitCorrelation,
        }
    }
}

impl FitConfig {
    pub fn validate(&self, matrix: &DocumentFeatureMatrix) -> Result<()> {
        if !(self.sig_level > 0.0 && self.sig_level < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "sig_level must be in (0, 1), got {}",
                self.sig_level
            )));
        }
        if self.k_dims < 1 {
            return Err(Error::InvalidConfig("k_dims must be >= 1".into()));
        }
        if self.k_dims >= matrix.n_docs().min(matrix.n_features()) {
            return Err(Error::InvalidConfig(format!(
                "k_dims = {} must be smaller than min(I, J) = {}",
                self.k_dims,
                matrix.n_docs().min(matrix.n_features())
            )));
        }
        if let Some(e) = self.epsilon_override {
            if !(e > 0.0) {
                return Err(Error::InvalidConfig("epsilon override must be positive".into()));
            }
        }
        if !(self.grad_tol > 0.0) {
            return Err(Error::InvalidConfig("grad_tol must be positive".into()));
        }
        Ok(())
    }
}

/// Log rate for one cell.
pub fn log_rate(params: &ModelParams, i: usize, j: usize) -> f64 {
    let mut eta = params.alpha[i] + params.psi[j];
    for k in 0..params.k_dims() {
        eta += params.beta[[j, k]] * params.theta[[i, k]];
    }
    eta
}

/// Poisson log-likelihood including the ln(count!) term, so values are
/// comparable across tools.
pub fn log_likelihood(matrix: &DocumentFeatureMatrix, params: &ModelParams) -> Result<f64> {
    params.validate_for(matrix)?;
    let core = log_likelihood_core(matrix, params);
    let ll = core - matrix.log_factorial_sum();
    if !ll.is_finite() {
        return Err(Error::Overflow(
            "log-likelihood is not finite; rates overflow exp()".into(),
        ));
    }
    Ok(ll)
}

/// Likelihood without the parameter-free ln(count!) term. May return
/// -infinity when rates overflow; callers treating this as an objective
/// reject such points.
pub(crate) fn log_likelihood_core(matrix: &DocumentFeatureMatrix, params: &ModelParams) -> f64 {
    let n_docs = matrix.n_docs();
    let chunks: Vec<(usize, usize)> = chunk_ranges(n_docs);
    let partials: Vec<f64> = chunks
        .par_iter()
        .map(|&(lo, hi)| {
            let mut acc = 0.0;
            for i in lo..hi {
                acc += doc_ll_core(matrix, params, i);
            }
            acc
        })
        .collect();
    partials.iter().sum()
}

fn doc_ll_core(matrix: &DocumentFeatureMatrix, params: &ModelParams, i: usize) -> f64 {
    let n_features = matrix.n_features();
    let k = params.k_dims();
    let mut sum_lambda = 0.0;
    let mut sum_obs = 0.0;
    let mut row = matrix.row(i).iter().peekable();
    for j in 0..n_features {
        let mut eta = params.alpha[i] + params.psi[j];
        for d in 0..k {
            eta += params.beta[[j, d]] * params.theta[[i, d]];
        }
        sum_lambda += eta.exp();
        if let Some(&&(jj, c)) = row.peek() {
            if jj == j {
                sum_obs += c as f64 * eta;
                row.next();
            }
        }
    }
    sum_obs - sum_lambda
}

/// Analytic gradients of `log_likelihood` with respect to every parameter
/// block. The ln(count!) term is constant and does not contribute.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub alpha: Array1<f64>,
    pub psi: Array1<f64>,
    pub beta: Array2<f64>,
    pub theta: Array2<f64>,
}

pub fn gradients(matrix: &DocumentFeatureMatrix, params: &ModelParams) -> Result<Gradients> {
    params.validate_for(matrix)?;
    Ok(ll_and_gradients(matrix, params).1)
}

/// One fused pass computing the core log-likelihood and all gradients.
pub(crate) fn ll_and_gradients(
    matrix: &DocumentFeatureMatrix,
    params: &ModelParams,
) -> (f64, Gradients) {
    let n_docs = matrix.n_docs();
    let n_features = matrix.n_features();
    let k = params.k_dims();
    let chunks = chunk_ranges(n_docs);

    struct Partial {
        ll: f64,
        alpha: Vec<f64>,
        theta: Vec<f64>,
        psi: Array1<f64>,
        beta: Array2<f64>,
    }

    let partials: Vec<Partial> = chunks
        .par_iter()
        .map(|&(lo, hi)| {
            let mut part = Partial {
                ll: 0.0,
                alpha: Vec::with_capacity(hi - lo),
                theta: Vec::with_capacity((hi - lo) * k),
                psi: Array1::zeros(n_features),
                beta: Array2::zeros((n_features, k)),
            };
            for i in lo..hi {
                let mut d_alpha = 0.0;
                let mut d_theta = vec![0.0; k];
                let mut ll = 0.0;
                let mut row = matrix.row(i).iter().peekable();
                for j in 0..n_features {
                    let mut eta = params.alpha[i] + params.psi[j];
                    for d in 0..k {
                        eta += params.beta[[j, d]] * params.theta[[i, d]];
                    }
                    let lambda = eta.exp();
                    let mut count = 0.0;
                    if let Some(&&(jj, c)) = row.peek() {
                        if jj == j {
                            count = c as f64;
                            row.next();
                        }
                    }
                    ll += count * eta - lambda;
                    let resid = count - lambda;
                    d_alpha += resid;
                    part.psi[j] += resid;
                    for d in 0..k {
                        d_theta[d] += params.beta[[j, d]] * resid;
                        part.beta[[j, d]] += params.theta[[i, d]] * resid;
                    }
                }
                part.ll += ll;
                part.alpha.push(d_alpha);
                part.theta.extend_from_slice(&d_theta);
            }
            part
        })
        .collect();

    let mut ll = 0.0;
    let mut g = Gradients {
        alpha: Array1::zeros(n_docs),
        psi: Array1::zeros(n_features),
        beta: Array2::zeros((n_features, k)),
        theta: Array2::zeros((n_docs, k)),
    };
    for (&(lo, _), part) in chunks.iter().zip(partials.iter()) {
        ll += part.ll;
        for (offset, v) in part.alpha.iter().enumerate() {
            g.alpha[lo + offset] = *v;
        }
        for (offset, chunk_row) in part.theta.chunks(k).enumerate() {
            for d in 0..k {
                g.theta[[lo + offset, d]] = chunk_row[d];
            }
        }
        g.psi += &part.psi;
        g.beta += &part.beta;
    }
    (ll, g)
}

/// Dense I x J matrix of Poisson rates. Used by the bootstrap; rates are
/// otherwise computed on demand row-wise.
pub fn lambda_matrix(params: &ModelParams) -> Result<Array2<f64>> {
    let (n_docs, n_features) = (params.n_docs(), params.n_features());
    let mut lambda = Array2::zeros((n_docs, n_features));
    for i in 0..n_docs {
        for j in 0..n_features {
            let v = log_rate(params, i, j).exp();
            if !v.is_finite() {
                return Err(Error::Overflow(format!(
                    "rate overflow at cell ({i}, {j})"
                )));
            }
            lambda[[i, j]] = v;
        }
    }
    Ok(lambda)
}

pub(crate) fn chunk_ranges(n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .step_by(DOC_CHUNK)
        .map(|lo| (lo, (lo + DOC_CHUNK).min(n)))
        .collect()
}

// ---------------------------------------------------------------------------
// Parameter serialization ("wordkrill-params-v1")
// ---------------------------------------------------------------------------

pub const PARAMS_SCHEMA_VERSION: &str = "wordkrill-params-v1";

#[derive(Serialize, Deserialize)]
struct ParamsJson {
    version: String,
    k_dims: usize,
    doc_ids: Vec<String>,
    feature_ids: Vec<String>,
    alpha: Vec<f64>,
    psi: Vec<f64>,
    /// Row-major J x K.
    beta: Vec<f64>,
    /// Row-major I x K.
    theta: Vec<f64>,
}

pub fn params_to_json(
    params: &ModelParams,
    doc_ids: &[String],
    feature_ids: &[String],
) -> serde_json::Value {
    let body = ParamsJson {
        version: PARAMS_SCHEMA_VERSION.to_string(),
        k_dims: params.k_dims(),
        doc_ids: doc_ids.to_vec(),
        feature_ids: feature_ids.to_vec(),
        alpha: params.alpha.to_vec(),
        psi: params.psi.to_vec(),
        beta: params.beta.iter().cloned().collect(),
        theta: params.theta.iter().cloned().collect(),
    };
    serde_json::to_value(body).expect("params serialize")
}

pub fn params_from_json(
    value: &serde_json::Value,
) -> Result<(ModelParams, Vec<String>, Vec<String>)> {
    let body: ParamsJson = serde_json::from_value(value.clone()).map_err(|e| Error::Json {
        context: "params".into(),
        message: e.to_string(),
    })?;
    if body.version != PARAMS_SCHEMA_VERSION {
        return Err(Error::Json {
            context: "params".into(),
            message: format!(
                "unsupported version `{}`, expected `{PARAMS_SCHEMA_VERSION}`",
                body.version
            ),
        });
    }
    let (i, j, k) = (body.doc_ids.len(), body.feature_ids.len(), body.k_dims);
    if body.alpha.len() != i
        || body.psi.len() != j
        || body.beta.len() != j * k
        || body.theta.len() != i * k
    {
        return Err(Error::Json {
            context: "params".into(),
            message: "array lengths inconsistent with k_dims and label counts".into(),
        });
    }
    let params = ModelParams {
        alpha: Array1::from_vec(body.alpha),
        psi: Array1::from_vec(body.psi),
        beta: Array2::from_shape_vec((j, k), body.beta).expect("shape checked"),
        theta: Array2::from_shape_vec((i, k), body.theta).expect("shape checked"),
    };
    Ok((params, body.doc_ids, body.feature_ids))
}
