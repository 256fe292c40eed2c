//! Corpus tokenization and count-matrix construction.
//!
//! The pipeline is fixed: lowercase, strip punctuation, strip numbers,
//! remove stop words, then frequency trimming. Tokens are produced by
//! Unicode whitespace splitting after punctuation characters have been
//! replaced by spaces; a token consisting entirely of numeric characters
//! counts as a number. Documents emptied along the way are dropped and
//! reported rather than treated as errors.

use std::collections::{HashMap, HashSet};

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::DocumentFeatureMatrix;

/// Preprocessing switches and trimming thresholds.
#[derive(Debug, Clone, Default)]
pub struct PreprocessSpec {
    pub lowercase: bool,
    pub strip_punctuation: bool,
    pub strip_numbers: bool,
    pub stopword_list: Option<HashSet<String>>,
    /// Drop features appearing in fewer than this many documents.
    pub min_doc_count: usize,
    /// Drop features with a smaller corpus-wide count.
    pub min_total_count: usize,
}

/// What the pipeline dropped, stage by stage.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PreprocessReport {
    /// Documents with no tokens before stop-word removal.
    pub docs_dropped_tokenization: Vec<String>,
    /// Documents emptied by stop-word removal.
    pub docs_dropped_stopwords: Vec<String>,
    /// Features removed by min_doc_count / min_total_count.
    pub features_dropped_trimming: Vec<String>,
    /// Documents emptied by frequency trimming.
    pub docs_dropped_trimming: Vec<String>,
    /// Features left without support after trimmed documents were dropped.
    pub features_dropped_cascade: Vec<String>,
    pub n_docs_in: usize,
    pub n_docs_out: usize,
    pub n_features_before_trimming: usize,
    pub n_features_out: usize,
}

/// Tokenize raw documents into a count matrix, applying `spec` in pipeline
/// order. Returns the matrix together with a report of everything dropped.
pub fn tokenize_corpus(
    documents: &[(String, String)],
    spec: &PreprocessSpec,
) -> Result<(DocumentFeatureMatrix, PreprocessReport)> {
    let mut seen = HashSet::new();
    for (id, _) in documents {
        if !seen.insert(id.as_str()) {
            return Err(Error::InvalidMatrix(format!("duplicate doc_id `{id}`")));
        }
    }

    let mut report = PreprocessReport {
        n_docs_in: documents.len(),
        ..Default::default()
    };

    let punct = Regex::new(r"\p{P}+").expect("valid punctuation pattern");

    // Token-level stages.
    let mut doc_tokens: Vec<(String, Vec<String>)> = Vec::new();
    for (id, text) in documents {
        let mut text = text.clone();
        if spec.lowercase {
            text = text.to_lowercase();
        }
        if spec.strip_punctuation {
            text = punct.replace_all(&text, " ").into_owned();
        }
        let mut tokens: Vec<String> = text.split_whitespace().map(str::to_owned).collect();
        if spec.strip_numbers {
            tokens.retain(|t| !t.chars().all(char::is_numeric));
        }
        if tokens.is_empty() {
            report.docs_dropped_tokenization.push(id.clone());
            continue;
        }
        if let Some(stops) = &spec.stopword_list {
            tokens.retain(|t| !stops.contains(t));
            if tokens.is_empty() {
                report.docs_dropped_stopwords.push(id.clone());
                continue;
            }
        }
        doc_tokens.push((id.clone(), tokens));
    }

    let stage = if spec.stopword_list.is_some() {
        "stopword removal"
    } else {
        "tokenization"
    };
    if doc_tokens.len() < 2 {
        return Err(Error::DegenerateCorpus {
            stage: stage.into(),
            detail: format!("{} document(s) left, need at least 2", doc_tokens.len()),
        });
    }

    // Count, with features ordered by first appearance.
    let mut feature_index: HashMap<String, usize> = HashMap::new();
    let mut feature_ids: Vec<String> = Vec::new();
    let mut counts: Vec<HashMap<usize, u64>> = Vec::with_capacity(doc_tokens.len());
    for (_, tokens) in &doc_tokens {
        let mut row: HashMap<usize, u64> = HashMap::new();
        for tok in tokens {
            let j = *feature_index.entry(tok.clone()).or_insert_with(|| {
                feature_ids.push(tok.clone());
                feature_ids.len() - 1
            });
            *row.entry(j).or_insert(0) += 1;
        }
        counts.push(row);
    }
    report.n_features_before_trimming = feature_ids.len();
    if feature_ids.len() < 2 {
        return Err(Error::DegenerateCorpus {
            stage: stage.into(),
            detail: format!("{} feature(s) left, need at least 2", feature_ids.len()),
        });
    }

    // Frequency trimming runs last so stop-word removal cannot resurrect
    // trimmed features.
    let mut doc_freq = vec![0usize; feature_ids.len()];
    let mut total = vec![0u64; feature_ids.len()];
    for row in &counts {
        for (&j, &c) in row {
            doc_freq[j] += 1;
            total[j] += c;
        }
    }
    let keep_feature: Vec<bool> = (0..feature_ids.len())
        .map(|j| doc_freq[j] >= spec.min_doc_count && total[j] >= spec.min_total_count as u64)
        .collect();
    for (j, keep) in keep_feature.iter().enumerate() {
        if !keep {
            report.features_dropped_trimming.push(feature_ids[j].clone());
        }
    }

    let mut keep_doc = vec![true; counts.len()];
    for (i, row) in counts.iter().enumerate() {
        if !row.keys().any(|&j| keep_feature[j]) {
            keep_doc[i] = false;
            report.docs_dropped_trimming.push(doc_tokens[i].0.clone());
        }
    }

    // Dropping emptied documents can in turn leave features without any
    // support; cascade until stable.
    let mut keep_feature = keep_feature;
    loop {
        let mut changed = false;
        for j in 0..feature_ids.len() {
            if !keep_feature[j] {
                continue;
            }
            let supported = counts
                .iter()
                .enumerate()
                .any(|(i, row)| keep_doc[i] && row.contains_key(&j));
            if !supported {
                keep_feature[j] = false;
                report.features_dropped_cascade.push(feature_ids[j].clone());
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for (i, row) in counts.iter().enumerate() {
            if keep_doc[i] && !row.keys().any(|&j| keep_feature[j]) {
                keep_doc[i] = false;
                report.docs_dropped_trimming.push(doc_tokens[i].0.clone());
            }
        }
    }

    let surviving_docs: Vec<usize> = (0..counts.len()).filter(|&i| keep_doc[i]).collect();
    let surviving_features: Vec<usize> =
        (0..feature_ids.len()).filter(|&j| keep_feature[j]).collect();
    if surviving_docs.len() < 2 || surviving_features.len() < 2 {
        return Err(Error::DegenerateCorpus {
            stage: "frequency trimming".into(),
            detail: format!(
                "{} document(s) and {} feature(s) left, need at least 2 of each",
                surviving_docs.len(),
                surviving_features.len()
            ),
        });
    }

    let new_doc_ids: Vec<String> = surviving_docs
        .iter()
        .map(|&i| doc_tokens[i].0.clone())
        .collect();
    let mut feature_remap = vec![usize::MAX; feature_ids.len()];
    let new_feature_ids: Vec<String> = surviving_features
        .iter()
        .enumerate()
        .map(|(new_j, &j)| {
            feature_remap[j] = new_j;
            feature_ids[j].clone()
        })
        .collect();

    let mut entries = Vec::new();
    for (new_i, &i) in surviving_docs.iter().enumerate() {
        let mut row: Vec<(usize, u64)> = counts[i]
            .iter()
            .filter(|(&j, _)| keep_feature[j])
            .map(|(&j, &c)| (feature_remap[j], c))
            .collect();
        row.sort_unstable();
        for (j, c) in row {
            entries.push((new_i, j, c));
        }
    }

    report.n_docs_out = new_doc_ids.len();
    report.n_features_out = new_feature_ids.len();
    let matrix = DocumentFeatureMatrix::new(new_doc_ids, new_feature_ids, entries)?;
    Ok((matrix, report))
}
