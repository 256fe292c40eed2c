use wordkrill::estimate::fit_to_json;
use wordkrill::{
    fit_wordfish, fit_wordkrill, AnchorPair, AnchorPolicy, FitConfig, FitResult,
};

use crate::manifest::{write_json, write_text, ManifestBuilder, RunLock};
use crate::{CliError, FitArgs, Method, EXIT_NONCONVERGENCE};

use super::{features_csv, load_dfm, positions_csv};

pub fn run(args: FitArgs) -> Result<(), CliError> {
    let matrix = load_dfm(&args.dfm, args.format)?;
    let config = build_config(&args)?;
    let _lock = RunLock::acquire(&args.out)?;

    let mut manifest = ManifestBuilder::new();
    manifest.input(&args.dfm)?;
    manifest.seed(args.seed);
    manifest.config(serde_json::to_value(&config).unwrap_or_default());

    let fit = match args.method {
        Method::Conditional => fit_wordfish(&matrix, &config)?,
        Method::Joint => fit_wordkrill(&matrix, &config)?,
    };
    write_artifacts(&fit, &matrix, &args)?;
    manifest.write(&args.out)?;

    if !fit.converged {
        return Err(CliError {
            code: EXIT_NONCONVERGENCE,
            message: format!(
                "fit did not converge after {} iterations; artifacts written to {}",
                fit.iterations,
                args.out.display()
            ),
        });
    }
    Ok(())
}

pub(crate) fn build_config(args: &FitArgs) -> Result<FitConfig, CliError> {
    let anchor = if args.anchor.is_empty() {
        AnchorPolicy::InitCorrelation
    } else {
        AnchorPolicy::Docs(parse_anchors(&args.anchor, args.k)?)
    };
    if args.method == Method::Conditional && args.k != 1 {
        return Err(CliError::input(
            "--method conditional supports --k 1 only; use --method joint",
        ));
    }
    Ok(FitConfig {
        k_dims: args.k,
        sig_level: args.sig_level,
        epsilon_override: args.epsilon,
        max_iters: args.max_iters,
        grad_tol: args.tol,
        seed: args.seed,
        anchor,
    })
}

fn parse_anchors(raw: &[String], k: usize) -> Result<Vec<AnchorPair>, CliError> {
    let mut pairs = vec![None; k];
    for spec in raw {
        let parts: Vec<&str> = spec.splitn(3, ':').collect();
        if parts.len() != 3 {
            return Err(CliError::input(format!(
                "anchor `{spec}` must be DIM:DOC_LOW:DOC_HIGH"
            )));
        }
        let dim: usize = parts[0]
            .parse()
            .map_err(|_| CliError::input(format!("anchor dimension `{}` invalid", parts[0])))?;
        if dim < 1 || dim > k {
            return Err(CliError::input(format!(
                "anchor dimension {dim} out of range 1..={k}"
            )));
        }
        pairs[dim - 1] = Some(AnchorPair {
            doc_low: parts[1].to_string(),
            doc_high: parts[2].to_string(),
        });
    }
    pairs
        .into_iter()
        .enumerate()
        .map(|(d, p)| {
            p.ok_or_else(|| {
                CliError::input(format!("missing anchor for dimension {}", d + 1))
            })
        })
        .collect()
}

pub(crate) fn write_artifacts(
    fit: &FitResult,
    matrix: &wordkrill::DocumentFeatureMatrix,
    args: &FitArgs,
) -> Result<(), CliError> {
    write_json(
        &args.out.join("fit.json"),
        &fit_to_json(fit, matrix.doc_ids(), matrix.feature_ids()),
    )?;
    write_text(
        &args.out.join("positions.csv"),
        &positions_csv(fit, matrix.doc_ids()),
    )?;
    write_text(
        &args.out.join("features.csv"),
        &features_csv(fit, matrix.feature_ids()),
    )?;
    Ok(())
}
