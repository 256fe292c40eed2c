//! Shared test oracles, independent of the library's implementation paths.
//!
//! The quantile oracle inverts distribution functions built from libm's
//! erfc and an in-house regularized incomplete gamma (series plus Lentz
//! continued fraction), by bisection to machine precision; the library
//! itself uses a different quantile implementation. Finite-difference
//! oracles differentiate the public log-likelihood directly.

#![allow(dead_code)]

use ndarray::{Array2, ArrayView1};
use wordkrill::{DocumentFeatureMatrix, ModelParams};

pub fn standard_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile by bisection on the erfc-based CDF.
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0);
    bisect(|x| standard_normal_cdf(x) - p, -40.0, 40.0)
}

/// Regularized lower incomplete gamma P(a, x).
pub fn reg_lower_gamma(a: f64, x: f64) -> f64 {
    assert!(a > 0.0 && x >= 0.0);
    if x == 0.0 {
        return 0.0;
    }
    if x < a + 1.0 {
        // Series representation.
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut denom = a;
        for _ in 0..10_000 {
            denom += 1.0;
            term *= x / denom;
            sum += term;
            if term.abs() < sum.abs() * 1e-16 {
                break;
            }
        }
        sum * (-x + a * x.ln() - libm::lgamma(a)).exp()
    } else {
        // Continued fraction for Q(a, x), modified Lentz.
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..10_000 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        let q = (-x + a * x.ln() - libm::lgamma(a)).exp() * h;
        1.0 - q
    }
}

/// Chi-squared quantile with `dof` degrees of freedom by bisection.
pub fn chi2_quantile(p: f64, dof: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0 && dof > 0.0);
    let hi = dof + 60.0 * (2.0 * dof).sqrt() + 500.0;
    bisect(|x| reg_lower_gamma(dof / 2.0, x / 2.0) - p, 0.0, hi)
}

fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let flo = f(lo);
    assert!(flo <= 0.0 && f(hi) >= 0.0, "root not bracketed");
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Central finite differences of the public log-likelihood with respect to
/// every parameter, as a flat vector ordered alpha, psi, beta (row-major),
/// theta (row-major).
pub fn fd_gradient(matrix: &DocumentFeatureMatrix, params: &ModelParams, h: f64) -> Vec<f64> {
    let mut grads = Vec::new();
    let eval = |p: &ModelParams| wordkrill::log_likelihood(matrix, p).unwrap();
    let diff = |set: &dyn Fn(&mut ModelParams, f64)| {
        let mut hi = params.clone();
        set(&mut hi, h);
        let mut lo = params.clone();
        set(&mut lo, -h);
        (eval(&hi) - eval(&lo)) / (2.0 * h)
    };
    for i in 0..params.n_docs() {
        grads.push(diff(&|p, d| p.alpha[i] += d));
    }
    for j in 0..params.n_features() {
        grads.push(diff(&|p, d| p.psi[j] += d));
    }
    for j in 0..params.n_features() {
        for k in 0..params.k_dims() {
            grads.push(diff(&|p, d| p.beta[[j, k]] += d));
        }
    }
    for i in 0..params.n_docs() {
        for k in 0..params.k_dims() {
            grads.push(diff(&|p, d| p.theta[[i, k]] += d));
        }
    }
    grads
}

/// Log-likelihood of document `i` as a function of its position only, with
/// all other parameters fixed: an independent per-document evaluation used
/// to differentiate the Fisher information numerically.
pub fn doc_conditional_ll(
    matrix: &DocumentFeatureMatrix,
    params: &ModelParams,
    i: usize,
    theta_i: &[f64],
) -> f64 {
    let k = params.k_dims();
    let mut ll = 0.0;
    for j in 0..matrix.n_features() {
        let mut eta = params.alpha[i] + params.psi[j];
        for d in 0..k {
            eta += params.beta[[j, d]] * theta_i[d];
        }
        ll += matrix.count(i, j) as f64 * eta - eta.exp();
    }
    ll
}

/// Negative finite-difference Hessian of the per-document conditional
/// log-likelihood in theta_i.
pub fn fd_neg_hessian(
    matrix: &DocumentFeatureMatrix,
    params: &ModelParams,
    i: usize,
    h: f64,
) -> Array2<f64> {
    let k = params.k_dims();
    let base: Vec<f64> = (0..k).map(|d| params.theta[[i, d]]).collect();
    let mut hess = Array2::<f64>::zeros((k, k));
    for a in 0..k {
        for b in 0..k {
            let at = |da: f64, db: f64| {
                let mut t = base.clone();
                t[a] += da;
                t[b] += db;
                doc_conditional_ll(matrix, params, i, &t)
            };
            let val = (at(h, h) - at(h, -h) - at(-h, h) + at(-h, -h)) / (4.0 * h * h);
            hess[[a, b]] = -val;
        }
    }
    hess
}

/// Label-keyed equality: same document and feature sets and identical
/// counts for every labelled cell, independent of row/column order.
pub fn same_counts(a: &DocumentFeatureMatrix, b: &DocumentFeatureMatrix) -> bool {
    use std::collections::{HashMap, HashSet};
    let docs_a: HashSet<_> = a.doc_ids().iter().collect();
    let docs_b: HashSet<_> = b.doc_ids().iter().collect();
    let feats_a: HashSet<_> = a.feature_ids().iter().collect();
    let feats_b: HashSet<_> = b.feature_ids().iter().collect();
    if docs_a != docs_b || feats_a != feats_b {
        return false;
    }
    let cells = |m: &DocumentFeatureMatrix| -> HashMap<(String, String), u64> {
        m.entries()
            .map(|(i, j, c)| ((m.doc_ids()[i].clone(), m.feature_ids()[j].clone()), c))
            .collect()
    };
    cells(a) == cells(b)
}

/// Absolute Pearson correlation.
pub fn abs_corr(x: ArrayView1<f64>, y: ArrayView1<f64>) -> f64 {
    wordkrill::stats::pearson(x, y).abs()
}

/// Deterministic small random count matrix for oracle tests.
pub fn random_matrix(
    seed: u64,
    n_docs: usize,
    n_features: usize,
) -> DocumentFeatureMatrix {
    let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
    let mut next = || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        state
    };
    let entries: Vec<(usize, usize, u64)> = (0..n_docs)
        .flat_map(|i| (0..n_features).map(move |j| (i, j)))
        .map(|(i, j)| (i, j, 1 + next() % 5))
        .collect();
    DocumentFeatureMatrix::new(
        (0..n_docs).map(|i| format!("d{i}")).collect(),
        (0..n_features).map(|j| format!("w{j}")).collect(),
        entries,
    )
    .unwrap()
}

/// Deterministic parameters spread over a modest range.
pub fn random_params(seed: u64, n_docs: usize, n_features: usize, k: usize) -> ModelParams {
    let mut state = seed.wrapping_mul(0x2545F4914F6CDD1D).wrapping_add(11);
    let mut next = || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    };
    let mut p = ModelParams::zeros(n_docs, n_features, k);
    for i in 0..n_docs {
        p.alpha[i] = 0.6 * next();
    }
    for j in 0..n_features {
        p.psi[j] = 0.8 * next();
    }
    for j in 0..n_features {
        for d in 0..k {
            p.beta[[j, d]] = 0.7 * next();
        }
    }
    for i in 0..n_docs {
        for d in 0..k {
            p.theta[[i, d]] = 2.0 * next();
        }
    }
    p
}
