//! On-disk formats for count matrices.
//!
//! Two formats are supported, both UTF-8:
//!
//! * triplet CSV: a header row `doc_id,feature_id,count` followed by one
//!   row per nonzero cell; duplicate (doc, feature) rows are summed.
//! * MatrixMarket coordinate integer, plus two sidecar label files at
//!   `<path>.docs` and `<path>.features` (one id per line; line i labels
//!   index i).

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::DocumentFeatureMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DfmFormat {
    TripletCsv,
    MatrixMarket,
}

impl DfmFormat {
    /// Guess from a file extension; `.mtx` means MatrixMarket, everything
    /// else triplet CSV.
    pub fn from_path(path: &Path) -> DfmFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some("mtx") => DfmFormat::MatrixMarket,
            _ => DfmFormat::TripletCsv,
        }
    }
}

pub fn load_counts(path: &Path, format: DfmFormat) -> Result<DocumentFeatureMatrix> {
    match format {
        DfmFormat::TripletCsv => load_triplet(path),
        DfmFormat::MatrixMarket => load_matrix_market(path),
    }
}

pub fn save_counts(
    matrix: &DocumentFeatureMatrix,
    path: &Path,
    format: DfmFormat,
) -> Result<()> {
    match format {
        DfmFormat::TripletCsv => save_triplet(matrix, path),
        DfmFormat::MatrixMarket => save_matrix_market(matrix, path),
    }
}

fn load_triplet(path: &Path) -> Result<DocumentFeatureMatrix> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(file);

    {
        let headers = reader
            .headers()
            .map_err(|e| Error::parse(path, 1, e.to_string()))?;
        let expected = ["doc_id", "feature_id", "count"];
        if headers.len() != 3 || headers.iter().zip(expected).any(|(h, e)| h != e) {
            return Err(Error::parse(
                path,
                1,
                format!("expected header `doc_id,feature_id,count`, got `{}`", headers.iter().collect::<Vec<_>>().join(",")),
            ));
        }
    }

    let mut doc_index = indexmap_new();
    let mut feature_index = indexmap_new();
    let mut entries: Vec<(usize, usize, u64)> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            Error::parse(path, line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != 3 {
            return Err(Error::parse(path, line, "expected 3 fields"));
        }
        let doc = record.get(0).unwrap();
        let feat = record.get(1).unwrap();
        let raw = record.get(2).unwrap().trim();
        let count: u64 = raw.parse().map_err(|_| {
            Error::parse(
                path,
                line,
                format!("count must be a nonnegative integer, got `{raw}`"),
            )
        })?;
        let i = indexmap_insert(&mut doc_index, doc);
        let j = indexmap_insert(&mut feature_index, feat);
        entries.push((i, j, count));
    }

    DocumentFeatureMatrix::new(indexmap_keys(doc_index), indexmap_keys(feature_index), entries)
}

fn save_triplet(matrix: &DocumentFeatureMatrix, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = csv::Writer::from_writer(file);
    writer
        .write_record(["doc_id", "feature_id", "count"])
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    for (i, j, c) in matrix.entries() {
        writer
            .write_record([
                matrix.doc_ids()[i].as_str(),
                matrix.feature_ids()[j].as_str(),
                &c.to_string(),
            ])
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    }
    writer
        .flush()
        .map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn sidecar_paths(path: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let mut docs = path.as_os_str().to_owned();
    docs.push(".docs");
    let mut features = path.as_os_str().to_owned();
    features.push(".features");
    (docs.into(), features.into())
}

fn load_matrix_market(path: &Path) -> Result<DocumentFeatureMatrix> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "empty file"))?;
    let header = header.map_err(|e| Error::io(path, e))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() < 5
        || !fields[0].eq_ignore_ascii_case("%%MatrixMarket")
        || !fields[1].eq_ignore_ascii_case("matrix")
        || !fields[2].eq_ignore_ascii_case("coordinate")
        || !fields[3].eq_ignore_ascii_case("integer")
        || !fields[4].eq_ignore_ascii_case("general")
    {
        return Err(Error::parse(
            path,
            1,
            "expected header `%%MatrixMarket matrix coordinate integer general`",
        ));
    }

    let mut dims: Option<(usize, usize, usize)> = None;
    let mut entries: Vec<(usize, usize, u64)> = Vec::new();
    for (idx, line) in lines {
        let line_no = idx as u64 + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('%') {
            continue;
        }
        let parts: Vec<&str> = trimmed.split_whitespace().collect();
        if dims.is_none() {
            if parts.len() != 3 {
                return Err(Error::parse(path, line_no, "expected `rows cols nnz`"));
            }
            let r: usize = parts[0]
                .parse()
                .map_err(|_| Error::parse(path, line_no, "invalid row count"))?;
            let c: usize = parts[1]
                .parse()
                .map_err(|_| Error::parse(path, line_no, "invalid column count"))?;
            let n: usize = parts[2]
                .parse()
                .map_err(|_| Error::parse(path, line_no, "invalid entry count"))?;
            dims = Some((r, c, n));
            continue;
        }
        if parts.len() != 3 {
            return Err(Error::parse(path, line_no, "expected `i j value`"));
        }
        let (rows, cols, _) = dims.unwrap();
        let i: usize = parts[0]
            .parse()
            .map_err(|_| Error::parse(path, line_no, "invalid row index"))?;
        let j: usize = parts[1]
            .parse()
            .map_err(|_| Error::parse(path, line_no, "invalid column index"))?;
        let v: u64 = parts[2].parse().map_err(|_| {
            Error::parse(
                path,
                line_no,
                format!("count must be a nonnegative integer, got `{}`", parts[2]),
            )
        })?;
        if i == 0 || i > rows || j == 0 || j > cols {
            return Err(Error::parse(path, line_no, "index out of declared range"));
        }
        entries.push((i - 1, j - 1, v));
    }

    let (rows, cols, nnz) = dims.ok_or_else(|| Error::parse(path, 0, "missing size line"))?;
    if entries.len() != nnz {
        return Err(Error::parse(
            path,
            0,
            format!("declared {nnz} entries, found {}", entries.len()),
        ));
    }

    let (docs_path, features_path) = sidecar_paths(path);
    let doc_ids = read_labels(&docs_path, rows, "doc_id")?;
    let feature_ids = read_labels(&features_path, cols, "feature_id")?;
    DocumentFeatureMatrix::new(doc_ids, feature_ids, entries)
}

fn save_matrix_market(matrix: &DocumentFeatureMatrix, path: &Path) -> Result<()> {
    for id in matrix.doc_ids().iter().chain(matrix.feature_ids()) {
        if id.contains('\n') || id.contains('\r') {
            return Err(Error::InvalidMatrix(format!(
                "id `{}` contains a line break and cannot be written to a label file",
                id.escape_debug()
            )));
        }
    }
    let mut out = String::new();
    out.push_str("%%MatrixMarket matrix coordinate integer general\n");
    out.push_str(&format!(
        "{} {} {}\n",
        matrix.n_docs(),
        matrix.n_features(),
        matrix.nnz()
    ));
    for (i, j, c) in matrix.entries() {
        out.push_str(&format!("{} {} {}\n", i + 1, j + 1, c));
    }
    write_all(path, out.as_bytes())?;

    let (docs_path, features_path) = sidecar_paths(path);
    write_all(&docs_path, (matrix.doc_ids().join("\n") + "\n").as_bytes())?;
    write_all(
        &features_path,
        (matrix.feature_ids().join("\n") + "\n").as_bytes(),
    )?;
    Ok(())
}

fn write_all(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn read_labels(path: &Path, expected: usize, what: &str) -> Result<Vec<String>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut labels = Vec::with_capacity(expected);
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if idx >= expected && line.is_empty() {
            continue; // trailing newline
        }
        labels.push(line);
    }
    if labels.len() != expected {
        return Err(Error::parse(
            path,
            labels.len() as u64,
            format!("expected {expected} {what} labels, found {}", labels.len()),
        ));
    }
    let mut seen = std::collections::HashSet::new();
    for (idx, label) in labels.iter().enumerate() {
        if !seen.insert(label.as_str()) {
            return Err(Error::parse(
                path,
                idx as u64 + 1,
                format!("duplicate {what} `{label}`"),
            ));
        }
    }
    Ok(labels)
}

// Tiny insertion-ordered string interner.
type IndexMap = (std::collections::HashMap<String, usize>, Vec<String>);

fn indexmap_new() -> IndexMap {
    (std::collections::HashMap::new(), Vec::new())
}

fn indexmap_insert(map: &mut IndexMap, key: &str) -> usize {
    if let Some(&i) = map.0.get(key) {
        return i;
    }
    let i = map.1.len();
    map.0.insert(key.to_owned(), i);
    map.1.push(key.to_owned());
    i
}

fn indexmap_keys(map: IndexMap) -> Vec<String> {
    map.1
}
