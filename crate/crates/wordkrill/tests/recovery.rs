//! Synthetic-truth integration tests: starting-value quality, recovery by
//! the conditional estimator, invariances of the fitting pipeline, and
//! bootstrap edge cases.

mod common;

use ndarray::Array2;
use wordkrill::{
    fit_wordfish, fit_wordkrill, generate, gradients, initial_values, parametric_bootstrap,
    signed_permutation, FitConfig, FitMethod, FitResult, ModelParams, SyntheticSpec,
};

#[test]
fn initial_values_correlate_with_some_true_dimension() {
    let (matrix, truth) = generate(&SyntheticSpec {
        n_docs: 40,
        n_features: 300,
        k_dims: 2,
        seed: 21,
        ..Default::default()
    })
    .unwrap();
    let init = initial_values(&matrix, 2).unwrap();
    for d in 0..2 {
        let best = (0..2)
            .map(|t| common::abs_corr(init.theta.column(d), truth.theta.column(t)))
            .fold(0.0f64, f64::max);
        assert!(
            best >= 0.5,
            "initial dimension {d} correlates at most {best:.3} with any true dimension"
        );
    }
}

#[test]
fn conditional_fit_recovers_unidimensional_truth() {
    let (raw, truth) = generate(&SyntheticSpec {
        n_docs: 20,
        n_features: 200,
        k_dims: 1,
        seed: 0,
        ..Default::default()
    })
    .unwrap();
    let matrix = raw.filter_features(2, 0).unwrap();
    assert_eq!(matrix.n_docs(), raw.n_docs());
    let fit = fit_wordfish(
        &matrix,
        &FitConfig {
            k_dims: 1,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(fit.converged);
    let r = common::abs_corr(fit.params.theta.column(0), truth.theta.column(0));
    assert!(r >= 0.95, "|r| = {r:.4}");
}

#[test]
fn relabeling_documents_leaves_positions_unchanged() {
    let (raw, _) = generate(&SyntheticSpec {
        n_docs: 12,
        n_features: 60,
        k_dims: 1,
        seed: 5,
        ..Default::default()
    })
    .unwrap();
    let matrix = raw.filter_features(2, 0).unwrap();
    let config = FitConfig {
        k_dims: 1,
        ..Default::default()
    };
    let base = fit_wordkrill(&matrix, &config).unwrap();
    assert!(base.converged);

    // Reverse the document order (labels move with their rows).
    let n = matrix.n_docs();
    let perm: Vec<usize> = (0..n).rev().collect();
    let permuted = wordkrill::DocumentFeatureMatrix::new(
        perm.iter().map(|&i| matrix.doc_ids()[i].clone()).collect(),
        matrix.feature_ids().to_vec(),
        matrix.entries().map(|(i, j, c)| (n - 1 - i, j, c)),
    )
    .unwrap();
    let refit = fit_wordkrill(&permuted, &config).unwrap();
    assert!(refit.converged);

    let reference = Array2::from_shape_fn((n, 1), |(r, _)| base.params.theta[[perm[r], 0]]);
    let alignment = signed_permutation(&reference, &refit.params.theta);
    let sign = alignment.signs[0];
    let mut max_dev = 0.0f64;
    for r in 0..n {
        let dev = (sign * refit.params.theta[[r, 0]] - reference[[r, 0]]).abs();
        max_dev = max_dev.max(dev);
    }
    assert!(max_dev <= 1e-4, "positions moved by {max_dev:.2e} under relabeling");
}

#[test]
fn larger_k_never_fits_worse() {
    let (raw, _) = generate(&SyntheticSpec {
        n_docs: 25,
        n_features: 120,
        k_dims: 2,
        seed: 9,
        ..Default::default()
    })
    .unwrap();
    let matrix = raw.filter_features(2, 0).unwrap();
    let fit1 = fit_wordkrill(
        &matrix,
        &FitConfig {
            k_dims: 1,
            ..Default::default()
        },
    )
    .unwrap();
    let fit2 = fit_wordkrill(
        &matrix,
        &FitConfig {
            k_dims: 2,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(fit1.converged && fit2.converged);
    assert!(
        fit2.final_loglik >= fit1.final_loglik - 1e-6,
        "K=2 fit ({}) below K=1 fit ({})",
        fit2.final_loglik,
        fit1.final_loglik
    );
}

#[test]
fn gradient_at_generating_parameters_is_statistically_small() {
    // With large counts the score at the truth is mean zero with variance
    // equal to the information, so each component should sit within a few
    // standard deviations of zero.
    let (matrix, truth) = generate(&SyntheticSpec {
        n_docs: 30,
        n_features: 150,
        k_dims: 1,
        psi_mean: 2.0,
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    let g = gradients(&matrix, &truth).unwrap();
    for i in 0..matrix.n_docs() {
        let scale = (matrix.row_total(i) as f64).sqrt();
        assert!(
            g.alpha[i].abs() <= 6.0 * scale,
            "alpha score {} vs scale {scale}",
            g.alpha[i]
        );
    }
    for j in 0..matrix.n_features() {
        let scale = (matrix.col_total(j) as f64).sqrt();
        assert!(g.psi[j].abs() <= 6.0 * scale);
    }
    // And the analytic score matches finite differences here too.
    let fd = common::fd_gradient(&matrix, &truth, 1e-5);
    let analytic: Vec<f64> = g
        .alpha
        .iter()
        .chain(g.psi.iter())
        .chain(g.beta.iter())
        .chain(g.theta.iter())
        .copied()
        .collect();
    for (a, f) in analytic.iter().zip(&fd) {
        assert!((a - f).abs() <= 1e-5 * f.abs().max(10.0));
    }
}

#[test]
fn bootstrap_survives_a_feature_with_vanishing_rates() {
    let matrix = common::random_matrix(77, 6, 8);
    let mut params = ModelParams::zeros(6, 8, 1);
    // Give every cell a healthy rate except feature 0, whose rate is so
    // small that every replicate draws it all zero and drops it.
    for j in 0..8 {
        params.psi[j] = if j == 0 { -40.0 } else { 1.0 };
    }
    for i in 0..6 {
        params.theta[[i, 0]] = ((i as f64) - 2.5) / 1.87;
    }
    let fit = FitResult {
        params,
        method: FitMethod::Joint,
        converged: true,
        iterations: 1,
        final_loglik: 0.0,
        residuals: wordkrill::ConstraintResiduals {
            mean: vec![0.0],
            var_dev: vec![0.0],
            cov: vec![],
        },
        epsilon: None,
        eps_applied: f64::INFINITY,
        divergent_params: vec![],
    };
    let config = FitConfig {
        k_dims: 1,
        max_iters: 200,
        ..Default::default()
    };
    let report = parametric_bootstrap(&matrix, &fit, &config, 12, 4).unwrap();
    // Replicates stay valid even though feature 0 vanishes in all of them.
    assert!(
        report.dropped_replicates < 12,
        "all replicates dropped: {}",
        report.dropped_replicates
    );
}

#[test]
fn generated_counts_are_calibrated_to_their_rates() {
    // Pooled standardized residuals (count - rate)/sqrt(rate) over many
    // seeds have mean near 0 within Monte-Carlo error.
    let mut sum = 0.0;
    let mut n = 0usize;
    for seed in 0..20u64 {
        let (matrix, truth) = generate(&SyntheticSpec {
            n_docs: 8,
            n_features: 20,
            k_dims: 1,
            seed: 500 + seed,
            ..Default::default()
        })
        .unwrap();
        for i in 0..matrix.n_docs() {
            for j in 0..matrix.n_features() {
                let rate = wordkrill::log_rate(&truth, i, j).exp();
                sum += (matrix.count(i, j) as f64 - rate) / rate.sqrt();
                n += 1;
            }
        }
    }
    let mean = sum / n as f64;
    assert!(
        mean.abs() <= 5.0 / (n as f64).sqrt(),
        "standardized residual mean {mean:.4} over {n} cells"
    );
}
