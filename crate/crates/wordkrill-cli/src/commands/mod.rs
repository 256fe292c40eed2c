pub mod fit;
pub mod ingest;
pub mod simulate;
pub mod uncertainty;

use std::path::Path;

use wordkrill::{DfmFormat, DocumentFeatureMatrix};

use crate::{CliError, CountFormat};

pub(crate) fn resolve_format(format: CountFormat, path: &Path) -> DfmFormat {
    match format {
        CountFormat::Triplet => DfmFormat::TripletCsv,
        CountFormat::Mtx => DfmFormat::MatrixMarket,
        CountFormat::Auto => DfmFormat::from_path(path),
    }
}

pub(crate) fn load_dfm(
    path: &Path,
    format: CountFormat,
) -> Result<DocumentFeatureMatrix, CliError> {
    if !path.exists() {
        return Err(CliError::input(format!(
            "count file {} does not exist",
            path.display()
        )));
    }
    Ok(wordkrill::load_counts(path, resolve_format(format, path))?)
}

/// positions.csv: doc_id plus one theta column per dimension.
pub(crate) fn positions_csv(fit: &wordkrill::FitResult, doc_ids: &[String]) -> String {
    let k = fit.params.k_dims();
    let mut out = String::from("doc_id");
    for d in 1..=k {
        out.push_str(&format!(",theta_{d}"));
    }
    out.push('\n');
    for (i, id) in doc_ids.iter().enumerate() {
        out.push_str(&csv_field(id));
        for d in 0..k {
            out.push_str(&format!(",{}", fit.params.theta[[i, d]]));
        }
        out.push('\n');
    }
    out
}

/// features.csv: feature_id, psi, then one beta column per dimension (the
/// data behind weight-versus-baseline diagnostic plots).
pub(crate) fn features_csv(fit: &wordkrill::FitResult, feature_ids: &[String]) -> String {
    let k = fit.params.k_dims();
    let mut out = String::from("feature_id,psi");
    for d in 1..=k {
        out.push_str(&format!(",beta_{d}"));
    }
    out.push('\n');
    for (j, id) in feature_ids.iter().enumerate() {
        out.push_str(&csv_field(id));
        out.push_str(&format!(",{}", fit.params.psi[j]));
        for d in 0..k {
            out.push_str(&format!(",{}", fit.params.beta[[j, d]]));
        }
        out.push('\n');
    }
    out
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
