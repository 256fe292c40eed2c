use std::fs;

use wordkrill::estimate::fit_from_json;
use wordkrill::inference::{uncertainty_to_csv, uncertainty_to_json};
use wordkrill::{
    confidence_ellipses, fisher_ses, parametric_bootstrap, FitConfig, UncertaintyReport,
};

use crate::manifest::{write_json, write_text, ManifestBuilder, RunLock};
use crate::{CliError, UncMethod, UncertaintyArgs, EXIT_UNRELIABLE};

use super::{csv_field, load_dfm};

pub fn run(args: UncertaintyArgs) -> Result<(), CliError> {
    let matrix = load_dfm(&args.dfm, args.format)?;
    let fit_text = fs::read_to_string(&args.fit)
        .map_err(|e| CliError::input(format!("cannot read {}: {e}", args.fit.display())))?;
    let fit_value: serde_json::Value = serde_json::from_str(&fit_text)
        .map_err(|e| CliError::input(format!("{} is not JSON: {e}", args.fit.display())))?;
    let (fit, doc_ids, feature_ids) = fit_from_json(&fit_value)?;
    if doc_ids != matrix.doc_ids() || feature_ids != matrix.feature_ids() {
        return Err(CliError::input(
            "fit.json labels do not match the count matrix; pass the matrix the fit was \
             estimated on",
        ));
    }
    if !fit.converged {
        return Err(CliError::input(
            "fit.json records a non-converged fit; refit before quantifying uncertainty",
        ));
    }

    let _lock = RunLock::acquire(&args.out)?;
    let mut manifest = ManifestBuilder::new();
    manifest.input(&args.dfm)?;
    manifest.input(&args.fit)?;
    manifest.seed(args.seed);
    manifest.config(serde_json::json!({
        "method": match args.method { UncMethod::Fisher => "fisher", UncMethod::Bootstrap => "bootstrap" },
        "reps": args.reps,
        "sig_level": args.sig_level,
        "max_iters": args.max_iters,
        "tol": args.tol,
    }));

    let report = match args.method {
        UncMethod::Fisher => {
            let report = fisher_ses(&matrix, &fit.params, args.sig_level)?;
            let singular = report.singular_docs();
            if !singular.is_empty() {
                let names: Vec<&str> = singular
                    .iter()
                    .map(|&i| matrix.doc_ids()[i].as_str())
                    .collect();
                eprintln!(
                    "warning: singular information for {} document(s): {}",
                    names.len(),
                    names.join(", ")
                );
            }
            report
        }
        UncMethod::Bootstrap => {
            let config = FitConfig {
                k_dims: fit.params.k_dims(),
                sig_level: args.sig_level,
                epsilon_override: None,
                max_iters: args.max_iters,
                grad_tol: args.tol,
                seed: args.seed,
                anchor: wordkrill::AnchorPolicy::InitCorrelation,
            };
            parametric_bootstrap(&matrix, &fit, &config, args.reps, args.seed)?
        }
    };

    write_outputs(&report, &fit, &matrix, &args)?;
    manifest.write(&args.out)?;

    if report.unreliable {
        return Err(CliError {
            code: EXIT_UNRELIABLE,
            message: format!(
                "{} of {} bootstrap replicates failed; report written to {} but marked \
                 unreliable",
                report.dropped_replicates,
                args.reps,
                args.out.display()
            ),
        });
    }
    Ok(())
}

fn write_outputs(
    report: &UncertaintyReport,
    fit: &wordkrill::FitResult,
    matrix: &wordkrill::DocumentFeatureMatrix,
    args: &UncertaintyArgs,
) -> Result<(), CliError> {
    write_json(
        &args.out.join("uncertainty.json"),
        &uncertainty_to_json(report, &fit.params, matrix.doc_ids()),
    )?;
    write_text(
        &args.out.join("uncertainty.csv"),
        &uncertainty_to_csv(report, &fit.params, matrix.doc_ids()),
    )?;
    // Plot-ready confidence ellipses for two-dimensional Fisher reports.
    if fit.params.k_dims() == 2 && report.method == wordkrill::UncertaintyMethod::Fisher {
        let ellipses = confidence_ellipses(report, &fit.params)?;
        let mut csv =
            String::from("doc_id,theta_1,theta_2,semi_major,semi_minor,angle_rad,level\n");
        for e in ellipses {
            csv.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                csv_field(&matrix.doc_ids()[e.doc_index]),
                e.center.0,
                e.center.1,
                e.semi_major,
                e.semi_minor,
                e.angle_rad,
                e.level
            ));
        }
        write_text(&args.out.join("ellipses.csv"), &csv)?;
    }
    Ok(())
}
