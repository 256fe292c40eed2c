//! Uncertainty quantification for fitted document positions: asymptotic
//! standard errors from the observed Fisher information (conditional on the
//! feature parameters), simulation draws from the asymptotic normal, and a
//! parametric bootstrap that refits resampled corpora.

use ndarray::{Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as NormalDist};

use crate::dfm::DocumentFeatureMatrix;
use crate::error::{Error, Result};
use crate::estimate::{
    apply_alignment, fit_wordkrill_from, signed_permutation, FitMethod, FitResult,
};
use crate::model::{log_rate, FitConfig, ModelParams};
use crate::stats;

/// Replicate count suggested for the parametric bootstrap.
pub const DEFAULT_BOOTSTRAP_REPS: usize = 500;

/// Fraction of failed replicates above which a bootstrap report is marked
/// unreliable.
const UNRELIABLE_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UncertaintyMethod {
    Fisher,
    Bootstrap,
}

impl std::fmt::Display for UncertaintyMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            UncertaintyMethod::Fisher => write!(f, "fisher"),
            UncertaintyMethod::Bootstrap => write!(f, "bootstrap"),
        }
    }
}

/// Per-document covariance estimates, standard errors, and intervals.
/// Documents with singular information (Fisher) or no successful
/// replicates (bootstrap) carry `None` entries rather than fabricated
/// numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyReport {
    pub method: UncertaintyMethod,
    /// Nominal significance level of the intervals.
    pub sig_level: f64,
    pub per_doc_cov: Vec<Option<Array2<f64>>>,
    pub std_errors: Vec<Option<Array1<f64>>>,
    pub intervals: Vec<Option<Vec<(f64, f64)>>>,
    pub bootstrap_reps: Option<usize>,
    /// Replicates dropped for non-convergence or degenerate resamples.
    pub dropped_replicates: usize,
    pub unreliable: bool,
    pub seed: Option<u64>,
}

impl UncertaintyReport {
    pub fn n_docs(&self) -> usize {
        self.per_doc_cov.len()
    }

    pub fn singular_docs(&self) -> Vec<usize> {
        (0..self.n_docs())
            .filter(|&i| self.std_errors[i].is_none())
            .collect()
    }
}

/// Observed Fisher information of document `i`'s position, conditional on
/// the feature parameters: entry (k, l) is sum_j beta_jk beta_jl lambda_ij.
pub fn fisher_information(
    matrix: &DocumentFeatureMatrix,
    params: &ModelParams,
    i: usize,
) -> Result<Array2<f64>> {
    params.validate_for(matrix)?;
    if i >= matrix.n_docs() {
        return Err(Error::Shape(format!("document index {i} out of range")));
    }
    let k = params.k_dims();
    let mut info = Array2::<f64>::zeros((k, k));
    for j in 0..matrix.n_features() {
        let lambda = log_rate(params, i, j).exp();
        for a in 0..k {
            let ba = params.beta[[j, a]];
            for b in a..k {
                info[[a, b]] += ba * params.beta[[j, b]] * lambda;
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            info[[a, b]] = info[[b, a]];
        }
    }
    Ok(info)
}

/// Standard errors and normal-theory intervals from the inverse information
/// of every document. Singular information is flagged, not inverted.
pub fn fisher_ses(
    matrix: &DocumentFeatureMatrix,
    params: &ModelParams,
    sig_level: f64,
) -> Result<UncertaintyReport> {
    params.validate_for(matrix)?;
    if !(sig_level > 0.0 && sig_level < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "sig_level must be in (0, 1), got {sig_level}"
        )));
    }
    let n_docs = matrix.n_docs();
    let k = params.k_dims();
    let z = NormalDist::standard().inverse_cdf(1.0 - sig_level / 2.0);

    let mut per_doc_cov = Vec::with_capacity(n_docs);
    let mut std_errors = Vec::with_capacity(n_docs);
    let mut intervals = Vec::with_capacity(n_docs);
    for i in 0..n_docs {
        let info = fisher_information(matrix, params, i)?;
        match stats::spd_inverse(&info) {
            Some(cov) => {
                let se: Array1<f64> = (0..k).map(|d| cov[[d, d]].sqrt()).collect();
                let ivals: Vec<(f64, f64)> = (0..k)
                    .map(|d| {
                        let center = params.theta[[i, d]];
                        (center - z * se[d], center + z * se[d])
                    })
                    .collect();
                per_doc_cov.push(Some(cov));
                std_errors.push(Some(se));
                intervals.push(Some(ivals));
            }
            None => {
                per_doc_cov.push(None);
                std_errors.push(None);
                intervals.push(None);
            }
        }
    }
    Ok(UncertaintyReport {
        method: UncertaintyMethod::Fisher,
        sig_level,
        per_doc_cov,
        std_errors,
        intervals,
        bootstrap_reps: None,
        dropped_replicates: 0,
        unreliable: false,
        seed: None,
    })
}

/// Simulation draws from N(theta_i, cov_i) for every document.
#[derive(Debug, Clone)]
pub struct PositionDraws {
    /// (n_draws, I, K); documents with singular covariance are NaN.
    pub draws: Array3<f64>,
    pub excluded_docs: Vec<usize>,
}

/// Draw positions from the asymptotic normal of a Fisher report.
/// Reproducible for a fixed seed; per-document RNG streams keep the output
/// independent of scheduling.
pub fn draw_positions(
    report: &UncertaintyReport,
    params: &ModelParams,
    n_draws: usize,
    seed: u64,
) -> Result<PositionDraws> {
    if report.method != UncertaintyMethod::Fisher {
        return Err(Error::InvalidConfig(
            "position draws need a fisher-method report".into(),
        ));
    }
    let n_docs = report.n_docs();
    let k = params.k_dims();
    if n_docs != params.n_docs() {
        return Err(Error::Shape("report/params document mismatch".into()));
    }

    let per_doc: Vec<Option<Array2<f64>>> = report
        .per_doc_cov
        .iter()
        .map(|c| c.as_ref().and_then(stats::cholesky))
        .collect();
    let excluded: Vec<usize> = (0..n_docs).filter(|&i| per_doc[i].is_none()).collect();

    let rows: Vec<Vec<f64>> = (0..n_docs)
        .into_par_iter()
        .map(|i| {
            let mut out = vec![f64::NAN; n_draws * k];
            if let Some(chol) = &per_doc[i] {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                let normal = Normal::new(0.0, 1.0).expect("valid");
                let mut z = vec![0.0; k];
                for draw in 0..n_draws {
                    for zd in z.iter_mut() {
                        *zd = normal.sample(&mut rng);
                    }
                    for d in 0..k {
                        let mut v = params.theta[[i, d]];
                        for t in 0..=d {
                            v += chol[[d, t]] * z[t];
                        }
                        out[draw * k + d] = v;
                    }
                }
            }
            out
        })
        .collect();

    let mut draws = Array3::<f64>::zeros((n_draws, n_docs, k));
    for (i, row) in rows.iter().enumerate() {
        for draw in 0..n_draws {
            for d in 0..k {
                draws[[draw, i, d]] = row[draw * k + d];
            }
        }
    }
    Ok(PositionDraws {
        draws,
        excluded_docs: excluded,
    })
}

/// Parametric bootstrap: resample counts from the fitted rates, refit with
/// the original estimates as starting values, align each replicate to the
/// original positions, and summarize the replicate distribution.
pub fn parametric_bootstrap(
    matrix: &DocumentFeatureMatrix,
    fit: &FitResult,
    config: &FitConfig,
    reps: usize,
    seed: u64,
) -> Result<UncertaintyReport> {
    if reps < 2 {
        return Err(Error::InvalidConfig(format!(
            "bootstrap needs at least 2 replicates, got {reps}"
        )));
    }
    if !fit.converged {
        return Err(Error::InvalidConfig(
            "the bootstrap requires a converged fit".into(),
        ));
    }
    fit.params.validate_for(matrix)?;
    let n_docs = matrix.n_docs();
    let k = fit.params.k_dims();
    let lambda = crate::model::lambda_matrix(&fit.params)?;

    // Replicates run in parallel with per-replicate RNG streams and are
    // aggregated in replicate order, so the report is reproducible.
    let replicate_thetas: Vec<Option<Array2<f64>>> = (0..reps)
        .into_par_iter()
        .map(|b| bootstrap_replicate(matrix, fit, config, &lambda, seed, b))
        .collect();

    let dropped = replicate_thetas.iter().filter(|r| r.is_none()).count();
    let unreliable = (dropped as f64) > UNRELIABLE_FRACTION * reps as f64;

    let mut per_doc_cov = Vec::with_capacity(n_docs);
    let mut std_errors = Vec::with_capacity(n_docs);
    let mut intervals = Vec::with_capacity(n_docs);
    for i in 0..n_docs {
        // Replicate draws for this document, skipping replicates where the
        // document was dropped by resampling.
        let draws: Vec<Vec<f64>> = replicate_thetas
            .iter()
            .flatten()
            .filter_map(|theta| {
                let row: Vec<f64> = (0..k).map(|d| theta[[i, d]]).collect();
                row.iter().all(|v| v.is_finite()).then_some(row)
            })
            .collect();
        if draws.len() < 2 {
            per_doc_cov.push(None);
            std_errors.push(None);
            intervals.push(None);
            continue;
        }
        let n = draws.len();
        let mut cov = Array2::<f64>::zeros((k, k));
        let means: Vec<f64> = (0..k)
            .map(|d| draws.iter().map(|r| r[d]).sum::<f64>() / n as f64)
            .collect();
        for a in 0..k {
            for b in 0..k {
                let s: f64 = draws
                    .iter()
                    .map(|r| (r[a] - means[a]) * (r[b] - means[b]))
                    .sum();
                cov[[a, b]] = s / (n - 1) as f64;
            }
        }
        let se: Array1<f64> = (0..k).map(|d| cov[[d, d]].sqrt()).collect();
        let ivals: Vec<(f64, f64)> = (0..k)
            .map(|d| {
                let mut vals: Vec<f64> = draws.iter().map(|r| r[d]).collect();
                vals.sort_by(|a, b| a.partial_cmp(b).expect("finite draws"));
                (
                    percentile(&vals, config.sig_level / 2.0),
                    percentile(&vals, 1.0 - config.sig_level / 2.0),
                )
            })
            .collect();
        per_doc_cov.push(Some(cov));
        std_errors.push(Some(se));
        intervals.push(Some(ivals));
    }

    Ok(UncertaintyReport {
        method: UncertaintyMethod::Bootstrap,
        sig_level: config.sig_level,
        per_doc_cov,
        std_errors,
        intervals,
        bootstrap_reps: Some(reps),
        dropped_replicates: dropped,
        unreliable,
        seed: Some(seed),
    })
}

/// One bootstrap replicate: resample, refit, align back. Returns the
/// replicate's theta in the original document order (NaN rows for documents
/// dropped by the resample), or None when the replicate failed.
fn bootstrap_replicate(
    matrix: &DocumentFeatureMatrix,
    fit: &FitResult,
    config: &FitConfig,
    lambda: &Array2<f64>,
    seed: u64,
    b: usize,
) -> Option<Array2<f64>> {
    let n_docs = matrix.n_docs();
    let n_features = matrix.n_features();
    let k = fit.params.k_dims();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + b as u64);
    let mut counts: Vec<Vec<u64>> = vec![vec![0; n_features]; n_docs];
    for (i, row) in counts.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            let rate = lambda[[i, j]];
            if rate > 0.0 {
                let draw: f64 = Poisson::new(rate).ok()?.sample(&mut rng);
                *cell = draw.round() as u64;
            }
        }
    }

    // Documents or features drawn all-zero are dropped, mirroring matrix
    // validation; the replicate remains valid on the surviving subset.
    let live_docs: Vec<usize> = (0..n_docs)
        .filter(|&i| counts[i].iter().any(|&c| c > 0))
        .collect();
    let live_feats: Vec<usize> = (0..n_features)
        .filter(|&j| counts.iter().any(|row| row[j] > 0))
        .collect();
    if live_docs.len() < 2 || live_feats.len() <= k {
        return None;
    }

    let doc_ids: Vec<String> = live_docs
        .iter()
        .map(|&i| matrix.doc_ids()[i].clone())
        .collect();
    let feature_ids: Vec<String> = live_feats
        .iter()
        .map(|&j| matrix.feature_ids()[j].clone())
        .collect();
    let counts_ref = &counts;
    let live_feats_ref = &live_feats;
    let entries = live_docs.iter().enumerate().flat_map(move |(new_i, &i)| {
        live_feats_ref
            .iter()
            .enumerate()
            .filter(move |&(_, &j)| counts_ref[i][j] > 0)
            .map(move |(new_j, &j)| (new_i, new_j, counts_ref[i][j]))
    });
    let replicate = DocumentFeatureMatrix::new(doc_ids, feature_ids, entries).ok()?;

    // Warm start from the original estimates restricted to the survivors.
    let start = ModelParams {
        alpha: live_docs.iter().map(|&i| fit.params.alpha[i]).collect(),
        psi: live_feats.iter().map(|&j| fit.params.psi[j]).collect(),
        beta: Array2::from_shape_fn((live_feats.len(), k), |(r, d)| {
            fit.params.beta[[live_feats[r], d]]
        }),
        theta: Array2::from_shape_fn((live_docs.len(), k), |(r, d)| {
            fit.params.theta[[live_docs[r], d]]
        }),
    };

    let refit = match fit.method {
        FitMethod::Conditional => {
            crate::estimate::refit_conditional(&replicate, start, config).ok()?
        }
        FitMethod::Joint => fit_wordkrill_from(&replicate, start, config).ok()?,
    };
    if !refit.converged {
        return None;
    }

    // Align the replicate to the original positions over surviving docs.
    let reference = Array2::from_shape_fn((live_docs.len(), k), |(r, d)| {
        fit.params.theta[[live_docs[r], d]]
    });
    let alignment = signed_permutation(&reference, &refit.params.theta);
    let aligned = apply_alignment(&refit.params, &alignment);

    let mut theta = Array2::<f64>::from_elem((n_docs, k), f64::NAN);
    for (r, &i) in live_docs.iter().enumerate() {
        for d in 0..k {
            theta[[i, d]] = aligned.theta[[r, d]];
        }
    }
    Some(theta)
}

/// Linear-interpolated empirical quantile of sorted values.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    debug_assert!(n >= 1);
    let h = p.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

/// Axis-aligned description of the (1 - sig_level) confidence ellipse of a
/// two-dimensional position estimate.
#[derive(Debug, Clone, Serialize)]
pub struct EllipseParams {
    pub doc_index: usize,
    pub center: (f64, f64),
    pub semi_major: f64,
    pub semi_minor: f64,
    /// Orientation of the major axis, radians from the first dimension.
    pub angle_rad: f64,
    pub level: f64,
}

/// Confidence ellipses for a two-dimensional Fisher report; the squared
/// semi-axes are the covariance eigenvalues scaled by the chi-squared
/// quantile with 2 degrees of freedom.
pub fn confidence_ellipses(
    report: &UncertaintyReport,
    params: &ModelParams,
) -> Result<Vec<EllipseParams>> {
    if params.k_dims() != 2 {
        return Err(Error::InvalidConfig(
            "confidence ellipses are defined for K = 2".into(),
        ));
    }
    let level = 1.0 - report.sig_level;
    let chi2 = statrs::distribution::ChiSquared::new(2.0)
        .expect("valid dof")
        .inverse_cdf(level);
    let mut out = Vec::new();
    for (i, cov) in report.per_doc_cov.iter().enumerate() {
        let Some(cov) = cov else { continue };
        // Closed-form eigendecomposition of the symmetric 2x2 covariance.
        let (a, b, c) = (cov[[0, 0]], cov[[0, 1]], cov[[1, 1]]);
        let tr = a + c;
        let det = a * c - b * b;
        let disc = ((tr * tr / 4.0 - det).max(0.0)).sqrt();
        let l1 = tr / 2.0 + disc;
        let l2 = (tr / 2.0 - disc).max(0.0);
        let angle = if b.abs() < 1e-300 && a >= c {
            0.0
        } else if b.abs() < 1e-300 {
            std::f64::consts::FRAC_PI_2
        } else {
            (l1 - a).atan2(b)
        };
        out.push(EllipseParams {
            doc_index: i,
            center: (params.theta[[i, 0]], params.theta[[i, 1]]),
            semi_major: (chi2 * l1).sqrt(),
            semi_minor: (chi2 * l2).sqrt(),
            angle_rad: angle,
            level,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Serialization ("wordkrill-uncertainty-v1")
// ---------------------------------------------------------------------------

pub const UNCERTAINTY_SCHEMA_VERSION: &str = "wordkrill-uncertainty-v1";

#[derive(Serialize, Deserialize)]
struct DocUncertaintyJson {
    doc_id: String,
    theta: Vec<f64>,
    cov: Option<Vec<Vec<f64>>>,
    se: Option<Vec<f64>>,
    lower: Option<Vec<f64>>,
    upper: Option<Vec<f64>>,
}

/// JSON form of a report, including positions for context.
pub fn uncertainty_to_json(
    report: &UncertaintyReport,
    params: &ModelParams,
    doc_ids: &[String],
) -> serde_json::Value {
    let k = params.k_dims();
    let docs: Vec<DocUncertaintyJson> = (0..report.n_docs())
        .map(|i| DocUncertaintyJson {
            doc_id: doc_ids[i].clone(),
            theta: (0..k).map(|d| params.theta[[i, d]]).collect(),
            cov: report.per_doc_cov[i]
                .as_ref()
                .map(|c| (0..k).map(|a| (0..k).map(|b| c[[a, b]]).collect()).collect()),
            se: report.std_errors[i].as_ref().map(|s| s.to_vec()),
            lower: report.intervals[i]
                .as_ref()
                .map(|iv| iv.iter().map(|(lo, _)| *lo).collect()),
            upper: report.intervals[i]
                .as_ref()
                .map(|iv| iv.iter().map(|(_, hi)| *hi).collect()),
        })
        .collect();
    serde_json::json!({
        "version": UNCERTAINTY_SCHEMA_VERSION,
        "method": report.method,
        "sig_level": report.sig_level,
        "bootstrap_reps": report.bootstrap_reps,
        "dropped_replicates": report.dropped_replicates,
        "unreliable": report.unreliable,
        "seed": report.seed,
        "docs": docs,
    })
}

/// CSV export: one row per (document, dimension) with empty cells where the
/// information was singular.
pub fn uncertainty_to_csv(
    report: &UncertaintyReport,
    params: &ModelParams,
    doc_ids: &[String],
) -> String {
    let k = params.k_dims();
    let mut out = String::from("doc_id,dim,theta,se,lower,upper,method\n");
    for i in 0..report.n_docs() {
        for d in 0..k {
            let se = report.std_errors[i]
                .as_ref()
                .map(|s| s[d].to_string())
                .unwrap_or_default();
            let (lo, hi) = report.intervals[i]
                .as_ref()
                .map(|iv| (iv[d].0.to_string(), iv[d].1.to_string()))
                .unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                csv_field(&doc_ids[i]),
                d + 1,
                params.theta[[i, d]],
                se,
                lo,
                hi,
                report.method
            ));
        }
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
