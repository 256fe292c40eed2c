use wordkrill::estimate::fit_to_json;
use wordkrill::model::params_to_json;
use wordkrill::{
    fit_wordkrill, generate, save_counts, signed_permutation, AnchorPolicy, DfmFormat,
    FitConfig, SyntheticSpec,
};

use crate::manifest::{write_json, write_text, ManifestBuilder, RunLock};
use crate::{CliError, SimulateArgs, EXIT_NONCONVERGENCE};

use super::{features_csv, positions_csv};

pub fn run(args: SimulateArgs) -> Result<(), CliError> {
    let spec = SyntheticSpec {
        n_docs: args.docs,
        n_features: args.features,
        k_dims: args.k,
        alpha_sd: args.alpha_sd,
        psi_mean: args.psi_mean,
        psi_sd: args.psi_sd,
        beta_sd: args.beta_sd,
        seed: args.seed,
    };
    let _lock = RunLock::acquire(&args.out)?;
    let mut manifest = ManifestBuilder::new();
    manifest.seed(args.seed);
    manifest.config(serde_json::json!({
        "docs": args.docs,
        "features": args.features,
        "k": args.k,
        "alpha_sd": args.alpha_sd,
        "psi_mean": args.psi_mean,
        "psi_sd": args.psi_sd,
        "beta_sd": args.beta_sd,
        "fit": args.fit,
        "min_doc_count": args.min_doc_count,
    }));

    let (matrix, truth) = generate(&spec)?;
    save_counts(&matrix, &args.out.join("matrix.csv"), DfmFormat::TripletCsv)?;
    write_json(
        &args.out.join("truth.json"),
        &params_to_json(&truth, matrix.doc_ids(), matrix.feature_ids()),
    )?;

    if !args.fit {
        manifest.write(&args.out)?;
        return Ok(());
    }

    // Chained recovery run: guard rare features, fit, align to the truth.
    let fit_matrix = if args.min_doc_count > 0 {
        matrix.filter_features(args.min_doc_count, 0)?
    } else {
        matrix.clone()
    };
    let config = FitConfig {
        k_dims: args.k,
        sig_level: 0.05,
        epsilon_override: None,
        max_iters: 500,
        grad_tol: 1e-8,
        seed: args.seed,
        anchor: AnchorPolicy::InitCorrelation,
    };
    let fit = fit_wordkrill(&fit_matrix, &config)?;

    write_json(
        &args.out.join("fit.json"),
        &fit_to_json(&fit, fit_matrix.doc_ids(), fit_matrix.feature_ids()),
    )?;
    write_text(
        &args.out.join("positions.csv"),
        &positions_csv(&fit, fit_matrix.doc_ids()),
    )?;
    write_text(
        &args.out.join("features.csv"),
        &features_csv(&fit, fit_matrix.feature_ids()),
    )?;

    // Truth rows restricted to the documents that survived the guard.
    let truth_rows: Vec<usize> = fit_matrix
        .doc_ids()
        .iter()
        .map(|id| {
            matrix
                .doc_ids()
                .iter()
                .position(|m| m == id)
                .expect("surviving doc exists in the generated corpus")
        })
        .collect();
    let reference = ndarray_from_rows(&truth, &truth_rows);
    let alignment = signed_permutation(&reference, &fit.params.theta);

    let recovery = serde_json::json!({
        "version": "wordkrill-recovery-v1",
        "converged": fit.converged,
        "per_dimension_abs_correlation": alignment.corr,
        "permutation": alignment.perm,
        "signs": alignment.signs,
        "residuals": fit.residuals,
        "eps_applied": fit.eps_applied,
        "n_docs_fit": fit_matrix.n_docs(),
        "n_features_fit": fit_matrix.n_features(),
    });
    write_json(&args.out.join("recovery_report.json"), &recovery)?;
    manifest.write(&args.out)?;

    if !fit.converged {
        return Err(CliError {
            code: EXIT_NONCONVERGENCE,
            message: format!(
                "chained fit did not converge; artifacts written to {}",
                args.out.display()
            ),
        });
    }
    Ok(())
}

fn ndarray_from_rows(truth: &wordkrill::ModelParams, rows: &[usize]) -> ndarray::Array2<f64> {
    let k = truth.k_dims();
    ndarray::Array2::from_shape_fn((rows.len(), k), |(r, d)| truth.theta[[rows[r], d]])
}
