//! FSL-style `bvals` (1×N) and `bvecs` (3×N, N×3 also accepted) text files.

use std::path::Path;

use crate::dataset::GradientTable;
use crate::error::{Error, Result};

use super::{atomic_write, read_file};

fn table_error(path: &Path, msg: String) -> Error {
    Error::GradientTable {
        path: path.to_path_buf(),
        msg,
    }
}

/// Whitespace-separated numeric rows; blank lines are skipped.
fn parse_rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|_| table_error(path, "file is not valid UTF-8".into()))?;
    let mut rows = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let row = line
            .split_whitespace()
            .enumerate()
            .map(|(col, tok)| {
                tok.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                    table_error(
                        path,
                        format!("row {}, column {}: {tok:?} is not a number", line_no + 1, col + 1),
                    )
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if !row.is_empty() {
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn read_bvals(path: &Path) -> Result<Vec<f64>> {
    let rows = parse_rows(path)?;
    // One row, or one value per row.
    if rows.len() == 1 {
        Ok(rows.into_iter().next().unwrap_or_default())
    } else if rows.iter().all(|r| r.len() == 1) {
        Ok(rows.into_iter().map(|r| r[0]).collect())
    } else {
        Err(table_error(path, format!("expected a single row of b-values, found {} rows", rows.len())))
    }
}

/// Directions from a 3×N (preferred) or N×3 layout.
pub fn read_bvecs(path: &Path, n: usize) -> Result<Vec<[f64; 3]>> {
    let rows = parse_rows(path)?;
    if rows.len() == 3 && rows.iter().all(|r| r.len() == n) {
        return Ok((0..n).map(|i| [rows[0][i], rows[1][i], rows[2][i]]).collect());
    }
    if rows.len() == n && rows.iter().all(|r| r.len() == 3) {
        return Ok(rows.iter().map(|r| [r[0], r[1], r[2]]).collect());
    }
    if rows.len() == 3 {
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != n) {
            return Err(table_error(
                path,
                format!("row {} has {} columns, expected {n} to match bvals", i + 1, r.len()),
            ));
        }
    }
    Err(table_error(
        path,
        format!("expected 3 rows of {n} values (or {n} rows of 3), found {} rows", rows.len()),
    ))
}

pub fn read_bvals_bvecs(bvals: &Path, bvecs: &Path) -> Result<GradientTable> {
    let b = read_bvals(bvals)?;
    let g = read_bvecs(bvecs, b.len())?;
    GradientTable::new(b, g)
}

fn join(values: impl Iterator<Item = f64>) -> String {
    values.map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

/// Write `bvals` as one row and `bvecs` as three rows; values keep full precision.
pub fn write_bvals_bvecs(table: &GradientTable, bvals: &Path, bvecs: &Path) -> Result<()> {
    atomic_write(bvals, format!("{}\n", join(table.bvals().iter().copied())).as_bytes())?;
    let text: String = (0..3)
        .map(|a| format!("{}\n", join(table.bvecs().iter().map(|g| g[a]))))
        .collect();
    atomic_write(bvecs, text.as_bytes())
}
