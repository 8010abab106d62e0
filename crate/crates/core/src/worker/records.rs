//! Whitespace-separated numeric record files.
//!
//! One matrix row per line, entries separated by a single space, every line
//! newline-terminated, no header. Numbers use the shortest decimal text that
//! parses back to the same binary64, so a write/read cycle is bit-exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::linalg::DenseMatrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RecordError {
    #[error("i/o failure on {path}: {reason}")]
    IoFailure { path: String, reason: String },
    #[error("line {line} has {found} entries, expected {expected}")]
    RaggedRows { line: usize, expected: usize, found: usize },
    #[error("line {line}: cannot parse {token:?} as a finite number")]
    ParseError { line: usize, token: String },
}

/// Shortest round-trip decimal text for one entry.
pub fn format_number(x: f64) -> String {
    let a = x.abs();
    if a == 0.0 || (1e-5..1e16).contains(&a) {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

pub fn format_records(m: &DenseMatrix) -> String {
    let mut out = String::new();
    for row in m.row_iter() {
        for (j, x) in row.iter().enumerate() {
            if j > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{}", format_number(*x));
        }
        out.push('\n');
    }
    out
}

/// Parses record text; blank lines are skipped and an empty text yields a
/// 0x0 matrix.
pub fn parse_records(text: &str) -> Result<DenseMatrix, RecordError> {
    let mut data = Vec::new();
    let mut rows = 0;
    let mut cols = None;
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let before = data.len();
        for token in line.split_ascii_whitespace() {
            let x: f64 = token
                .parse()
                .ok()
                .filter(|x: &f64| x.is_finite())
                .ok_or_else(|| RecordError::ParseError {
                    line: lineno,
                    token: token.to_owned(),
                })?;
            data.push(x);
        }
        let found = data.len() - before;
        if found == 0 {
            continue;
        }
        match cols {
            None => cols = Some(found),
            Some(expected) if expected != found => {
                return Err(RecordError::RaggedRows {
                    line: lineno,
                    expected,
                    found,
                })
            }
            Some(_) => {}
        }
        rows += 1;
    }
    Ok(DenseMatrix::new(rows, cols.unwrap_or(0), data).expect("row lengths checked, entries finite"))
}

/// Writes `m` to `path`, replacing any existing file.
pub fn export_file(path: &Path, m: &DenseMatrix) -> Result<(), RecordError> {
    fs::write(path, format_records(m)).map_err(|e| RecordError::IoFailure {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

pub fn read_records(path: &Path) -> Result<DenseMatrix, RecordError> {
    let text = fs::read_to_string(path).map_err(|e| RecordError::IoFailure {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    parse_records(&text)
}
