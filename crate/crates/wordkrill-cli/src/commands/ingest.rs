use std::collections::HashSet;
use std::fs;
use std::path::Path;

use wordkrill::{save_counts, tokenize_corpus, PreprocessReport, PreprocessSpec};

use crate::manifest::{write_json, ManifestBuilder, RunLock};
use crate::{CliError, CountFormat, IngestArgs, InputFormat};

use super::{load_dfm, resolve_format};

pub fn run(args: IngestArgs) -> Result<(), CliError> {
    if !args.input.exists() {
        return Err(CliError::input(format!(
            "input path {} does not exist",
            args.input.display()
        )));
    }
    let out_dir = args
        .out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
        .to_path_buf();
    let _lock = RunLock::acquire(&out_dir)?;

    let treat_as_raw = match args.input_format {
        InputFormat::Raw => true,
        InputFormat::Auto => args.input.is_dir(),
        _ => false,
    };
    let mut manifest = ManifestBuilder::new();
    manifest.config(serde_json::json!({
        "mode": if treat_as_raw { "raw" } else { "counts" },
        "lowercase": args.lowercase,
        "strip_punct": args.strip_punct,
        "strip_numbers": args.strip_numbers,
        "stopwords": args.stopwords.as_ref().map(|p| p.display().to_string()),
        "min_doc_count": args.min_doc_count,
        "min_total_count": args.min_total_count,
    }));

    let stopword_list = match &args.stopwords {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                CliError::input(format!("stopword file {}: {e}", path.display()))
            })?;
            manifest.input(path)?;
            Some(
                text.lines()
                    .map(str::trim)
                    .filter(|l| !l.is_empty())
                    .map(str::to_owned)
                    .collect::<HashSet<_>>(),
            )
        }
        None => None,
    };

    let (matrix, report) = if treat_as_raw {
        let (documents, paths) = read_corpus_dir(&args.input)?;
        for path in &paths {
            manifest.input(path)?;
        }
        let spec = PreprocessSpec {
            lowercase: args.lowercase,
            strip_punctuation: args.strip_punct,
            strip_numbers: args.strip_numbers,
            stopword_list,
            min_doc_count: args.min_doc_count,
            min_total_count: args.min_total_count as usize,
        };
        tokenize_corpus(&documents, &spec)?
    } else {
        manifest.input(&args.input)?;
        let count_format = match args.input_format {
            InputFormat::Triplet => CountFormat::Triplet,
            InputFormat::Mtx => CountFormat::Mtx,
            _ => CountFormat::Auto,
        };
        let loaded = load_dfm(&args.input, count_format)?;
        let report = PreprocessReport {
            n_docs_in: loaded.n_docs(),
            n_features_before_trimming: loaded.n_features(),
            ..Default::default()
        };
        let trimmed = if args.min_doc_count > 0 || args.min_total_count > 0 {
            loaded.filter_features(args.min_doc_count, args.min_total_count)?
        } else {
            loaded
        };
        let mut report = report;
        report.n_docs_out = trimmed.n_docs();
        report.n_features_out = trimmed.n_features();
        (trimmed, report)
    };

    let format = resolve_format(args.out_format, &args.out);
    save_counts(&matrix, &args.out, format)?;

    let report_json = serde_json::json!({
        "version": "wordkrill-ingest-report-v1",
        "n_docs_in": report.n_docs_in,
        "n_docs_out": report.n_docs_out,
        "n_features_before_trimming": report.n_features_before_trimming,
        "n_features_out": report.n_features_out,
        "docs_dropped_tokenization": report.docs_dropped_tokenization,
        "docs_dropped_stopwords": report.docs_dropped_stopwords,
        "docs_dropped_trimming": report.docs_dropped_trimming,
        "features_dropped_trimming": report.features_dropped_trimming,
        "features_dropped_cascade": report.features_dropped_cascade,
    });
    write_json(&out_dir.join("report.json"), &report_json)?;
    manifest.write(&out_dir)?;
    Ok(())
}

/// Read every .txt file in a directory (sorted by name) as one document;
/// the file stem is the doc_id.
fn read_corpus_dir(
    dir: &Path,
) -> Result<(Vec<(String, String)>, Vec<std::path::PathBuf>), CliError> {
    if !dir.is_dir() {
        return Err(CliError::input(format!(
            "{} is not a directory; pass --input-format triplet|mtx for count files",
            dir.display()
        )));
    }
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| CliError::input(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("txt"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::input(format!(
            "no .txt files found in {}",
            dir.display()
        )));
    }
    let mut documents = Vec::with_capacity(paths.len());
    for path in &paths {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))?;
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("doc")
            .to_string();
        documents.push((id, text));
    }
    Ok((documents, paths))
}
