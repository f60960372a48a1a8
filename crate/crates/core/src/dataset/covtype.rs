//! UCI Covertype CSV: no header, 54 feature columns followed by the cover
//! type (1..=7). Reduced to a binary task: cover type 2 is class 1,
//! everything else class 0.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::Array2;

use super::Dataset;
use crate::error::{Error, Result};

const FEATURES: usize = 54;
const COLUMNS: usize = FEATURES + 1;
const POSITIVE_COVER_TYPE: i64 = 2;

/// Leading quantitative columns (elevation through fire-point distance).
/// The remaining 44 columns are 0/1 wilderness and soil indicators.
pub const COVTYPE_CONTINUOUS_COLUMNS: usize = 10;

pub fn load_covtype_csv(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_covtype(BufReader::new(file))
}

/// Parses CovType rows, binarizes the label and z-scores the continuous
/// columns over the whole input.
pub fn parse_covtype<R: BufRead>(reader: R) -> Result<Dataset> {
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (line_no, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Format(format!("line {}: {e}", line_no + 1)))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != COLUMNS {
            return Err(Error::Format(format!(
                "line {}: expected {COLUMNS} columns, found {}",
                line_no + 1,
                cells.len()
            )));
        }
        for (col, cell) in cells[..FEATURES].iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                line: line_no + 1,
                column: col + 1,
                message: format!("non-numeric cell {cell:?}"),
            })?;
            values.push(v);
        }
        let cover: i64 = cells[FEATURES].trim().parse().map_err(|_| Error::Parse {
            line: line_no + 1,
            column: COLUMNS,
            message: format!("non-integer cover type {:?}", cells[FEATURES]),
        })?;
        if !(1..=7).contains(&cover) {
            return Err(Error::Format(format!(
                "line {}: cover type {cover} outside 1..=7",
                line_no + 1
            )));
        }
        labels.push(usize::from(cover == POSITIVE_COVER_TYPE));
    }
    let n = labels.len();
    let mut features = Array2::from_shape_vec((n, FEATURES), values).expect("row width checked per line");
    standardize_columns(&mut features, COVTYPE_CONTINUOUS_COLUMNS);
    Dataset::new(features, labels, 2)
}

/// Population z-score of the first `k` columns; constant columns are only centred.
fn standardize_columns(features: &mut Array2<f64>, k: usize) {
    let n = features.nrows();
    if n == 0 {
        return;
    }
    for mut col in features.columns_mut().into_iter().take(k) {
        let mean = col.sum() / n as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        if std > 0.0 {
            col.mapv_inplace(|v| (v - mean) / std);
        } else {
            col.mapv_inplace(|v| v - mean);
        }
    }
}

/// Writes raw CovType rows (54 features + cover type) as headerless CSV.
pub fn write_covtype_csv(path: &Path, rows: &[[i64; COLUMNS]]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    let mut line = String::new();
    for row in rows {
        line.clear();
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                line.push(',');
            }
            line.push_str(&v.to_string());
        }
        line.push('\n');
        out.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}
