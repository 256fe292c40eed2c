//! Sparse document-feature matrices: construction, validation, text
//! preprocessing, and file formats.

mod io;
mod preprocess;

pub use io::{load_counts, save_counts, DfmFormat};
pub use preprocess::{tokenize_corpus, PreprocessReport, PreprocessSpec};

use std::collections::BTreeMap;
use std::collections::HashSet;

use crate::error::{Error, Result};

/// Sparse I x J matrix of nonnegative feature counts with document and
/// feature labels. Zero counts are never stored; every document and every
/// feature has at least one positive count.
#[derive(Debug, Clone)]
pub struct DocumentFeatureMatrix {
    doc_ids: Vec<String>,
    feature_ids: Vec<String>,
    /// Per document, entries (feature index, count) sorted by feature index.
    rows: Vec<Vec<(usize, u64)>>,
    /// Per feature, entries (doc index, count) sorted by doc index.
    cols: Vec<Vec<(usize, u64)>>,
    row_totals: Vec<u64>,
    col_totals: Vec<u64>,
    total: u64,
    /// Sum over all cells of ln(count!), constant in the model parameters.
    log_factorial_sum: f64,
}

impl PartialEq for DocumentFeatureMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.doc_ids == other.doc_ids
            && self.feature_ids == other.feature_ids
            && self.rows == other.rows
    }
}

impl DocumentFeatureMatrix {
    /// Build a matrix from labels and (doc index, feature index, count)
    /// entries. Duplicate cells are summed; zero counts are ignored.
    pub fn new(
        doc_ids: Vec<String>,
        feature_ids: Vec<String>,
        entries: impl IntoIterator<Item = (usize, usize, u64)>,
    ) -> Result<Self> {
        let n_docs = doc_ids.len();
        let n_features = feature_ids.len();
        if n_docs < 2 {
            return Err(Error::InvalidMatrix(format!(
                "need at least 2 documents, got {n_docs}"
            )));
        }
        if n_features < 2 {
            return Err(Error::InvalidMatrix(format!(
                "need at least 2 features, got {n_features}"
            )));
        }
        check_unique(&doc_ids, "doc_id")?;
        check_unique(&feature_ids, "feature_id")?;

        let mut cells: BTreeMap<(usize, usize), u64> = BTreeMap::new();
        for (i, j, c) in entries {
            if i >= n_docs {
                return Err(Error::InvalidMatrix(format!(
                    "document index {i} out of range (I = {n_docs})"
                )));
            }
            if j >= n_features {
                return Err(Error::InvalidMatrix(format!(
                    "feature index {j} out of range (J = {n_features})"
                )));
            }
            if c == 0 {
                continue;
            }
            *cells.entry((i, j)).or_insert(0) += c;
        }

        let mut rows: Vec<Vec<(usize, u64)>> = vec![Vec::new(); n_docs];
        let mut cols: Vec<Vec<(usize, u64)>> = vec![Vec::new(); n_features];
        let mut row_totals = vec![0u64; n_docs];
        let mut col_totals = vec![0u64; n_features];
        let mut total = 0u64;
        let mut log_factorial_sum = 0.0;
        for (&(i, j), &c) in &cells {
            rows[i].push((j, c));
            cols[j].push((i, c));
            row_totals[i] += c;
            col_totals[j] += c;
            total += c;
            log_factorial_sum += statrs::function::gamma::ln_gamma(c as f64 + 1.0);
        }

        if let Some(i) = row_totals.iter().position(|&t| t == 0) {
            return Err(Error::InvalidMatrix(format!(
                "document `{}` has no nonzero counts",
                doc_ids[i]
            )));
        }
        if let Some(j) = col_totals.iter().position(|&t| t == 0) {
            return Err(Error::InvalidMatrix(format!(
                "feature `{}` has no nonzero counts",
                feature_ids[j]
            )));
        }

        Ok(Self {
            doc_ids,
            feature_ids,
            rows,
            cols,
            row_totals,
            col_totals,
            total,
            log_factorial_sum,
        })
    }

    pub fn n_docs(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn n_features(&self) -> usize {
        self.feature_ids.len()
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn feature_ids(&self) -> &[String] {
        &self.feature_ids
    }

    /// Nonzero entries of document `i` as (feature index, count), sorted.
    pub fn row(&self, i: usize) -> &[(usize, u64)] {
        &self.rows[i]
    }

    /// Nonzero entries of feature `j` as (doc index, count), sorted.
    pub fn col(&self, j: usize) -> &[(usize, u64)] {
        &self.cols[j]
    }

    pub fn count(&self, i: usize, j: usize) -> u64 {
        match self.rows[i].binary_search_by_key(&j, |&(jj, _)| jj) {
            Ok(pos) => self.rows[i][pos].1,
            Err(_) => 0,
        }
    }

    pub fn row_total(&self, i: usize) -> u64 {
        self.row_totals[i]
    }

    pub fn col_total(&self, j: usize) -> u64 {
        self.col_totals[j]
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// Sum of ln(count!) over all stored cells.
    pub fn log_factorial_sum(&self) -> f64 {
        self.log_factorial_sum
    }

    /// All nonzero cells in (doc, feature) order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, u64)> + '_ {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(i, row)| row.iter().map(move |&(j, c)| (i, j, c)))
    }

    /// Apply frequency trimming to an existing matrix: drop features seen
    /// in fewer than `min_doc_count` documents or with corpus-wide count
    /// below `min_total_count`, then drop documents emptied by the trim
    /// (cascading until stable). Features confined to a single document
    /// are the classic source of divergent weight estimates, so a
    /// `min_doc_count` of 2 is the recommended guard before fitting.
    pub fn filter_features(
        &self,
        min_doc_count: usize,
        min_total_count: u64,
    ) -> Result<DocumentFeatureMatrix> {
        let mut keep_feature: Vec<bool> = (0..self.n_features())
            .map(|j| {
                self.cols[j].len() >= min_doc_count && self.col_totals[j] >= min_total_count
            })
            .collect();
        let mut keep_doc = vec![true; self.n_docs()];
        loop {
            let mut changed = false;
            for (i, row) in self.rows.iter().enumerate() {
                if keep_doc[i] && !row.iter().any(|&(j, _)| keep_feature[j]) {
                    keep_doc[i] = false;
                    changed = true;
                }
            }
            for (j, col) in self.cols.iter().enumerate() {
                if keep_feature[j] && !col.iter().any(|&(i, _)| keep_doc[i]) {
                    keep_feature[j] = false;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }

        let live_docs: Vec<usize> = (0..self.n_docs()).filter(|&i| keep_doc[i]).collect();
        let live_feats: Vec<usize> =
            (0..self.n_features()).filter(|&j| keep_feature[j]).collect();
        if live_docs.len() < 2 || live_feats.len() < 2 {
            return Err(Error::DegenerateCorpus {
                stage: "frequency trimming".into(),
                detail: format!(
                    "{} document(s) and {} feature(s) left, need at least 2 of each",
                    live_docs.len(),
                    live_feats.len()
                ),
            });
        }
        let mut feat_remap = vec![usize::MAX; self.n_features()];
        for (new_j, &j) in live_feats.iter().enumerate() {
            feat_remap[j] = new_j;
        }
        let feat_remap = &feat_remap;
        let keep_feature = &keep_feature;
        let entries = live_docs.iter().enumerate().flat_map(move |(new_i, &i)| {
            self.rows[i]
                .iter()
                .filter(move |&&(j, _)| keep_feature[j])
                .map(move |&(j, c)| (new_i, feat_remap[j], c))
        });
        DocumentFeatureMatrix::new(
            live_docs.iter().map(|&i| self.doc_ids[i].clone()).collect(),
            live_feats
                .iter()
                .map(|&j| self.feature_ids[j].clone())
                .collect(),
            entries,
        )
    }
}

fn check_unique(ids: &[String], what: &str) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::InvalidMatrix(format!("duplicate {what} `{id}`")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }

    #[test]
    fn duplicate_cells_are_summed() {
        let m = DocumentFeatureMatrix::new(
            labels("d", 2),
            labels("w", 2),
            vec![(0, 0, 2), (0, 0, 2), (0, 1, 1), (1, 0, 3)],
        )
        .unwrap();
        assert_eq!(m.count(0, 0), 4);
        assert_eq!(m.count(1, 1), 0);
        assert_eq!(m.total(), 8);
    }

    #[test]
    fn rejects_single_document_or_feature() {
        assert!(DocumentFeatureMatrix::new(labels("d", 1), labels("w", 3), vec![]).is_err());
        assert!(
            DocumentFeatureMatrix::new(labels("d", 2), labels("w", 1), vec![(0, 0, 1), (1, 0, 1)])
                .is_err()
        );
    }

    #[test]
    fn rejects_duplicate_ids() {
        let err = DocumentFeatureMatrix::new(
            vec!["a".into(), "a".into()],
            labels("w", 2),
            vec![(0, 0, 1), (1, 1, 1)],
        )
        .unwrap_err();
        assert!(err.to_string().contains("duplicate doc_id"));
    }

    #[test]
    fn rejects_empty_document() {
        let err = DocumentFeatureMatrix::new(
            labels("d", 2),
            labels("w", 2),
            vec![(0, 0, 1), (0, 1, 1)],
        )
        .unwrap_err();
        assert!(err.to_string().contains("d1"));
    }

    #[test]
    fn filter_cascades_from_features_to_documents_and_back() {
        // Feature u appears only in doc c; trimming it empties c, which in
        // turn removes v (supported only by c).
        let m = DocumentFeatureMatrix::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec!["x".into(), "y".into(), "u".into(), "v".into()],
            vec![
                (0, 0, 2),
                (0, 1, 1),
                (1, 0, 1),
                (1, 1, 3),
                (2, 2, 4),
                (2, 3, 1),
            ],
        )
        .unwrap();
        let trimmed = m.filter_features(2, 0).unwrap();
        assert_eq!(trimmed.doc_ids(), &["a".to_string(), "b".to_string()]);
        assert_eq!(trimmed.feature_ids(), &["x".to_string(), "y".to_string()]);
        assert_eq!(trimmed.count(0, 0), 2);

        // Trimming everything is a degenerate corpus.
        assert!(matches!(
            m.filter_features(4, 0),
            Err(Error::DegenerateCorpus { .. })
        ));
    }

    #[test]
    fn zero_counts_are_not_stored() {
        let m = DocumentFeatureMatrix::new(
            labels("d", 2),
            labels("w", 2),
            vec![(0, 0, 1), (0, 1, 0), (1, 1, 2)],
        )
        .unwrap();
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.row(0), &[(0, 1)]);
    }
}
