// SPDX-License-Identifier: Apache-2.0

//! Matrix files in two formats.
//!
//! * CSV: a `rows,cols` header line, then one line per row.
//! * Binary: `LRDM`, `rows: u32 LE`, `cols: u32 LE`, then `rows·cols` `f64 LE`
//!   values in row-major order.
//!
//! [`read_matrix`] picks the format from the leading bytes.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::{matrix_from_row_major, to_row_major, Matrix};

pub const MAGIC: &[u8; 4] = b"LRDM";

/// Parses either format from raw bytes.
pub fn parse_matrix(bytes: &[u8]) -> Result<Matrix> {
    if bytes.starts_with(MAGIC) {
        parse_binary(bytes)
    } else {
        let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse(format!("not UTF-8 text: {e}")))?;
        parse_csv(text)
    }
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_matrix(&bytes)
}

fn parse_dims(line: &str) -> Result<(usize, usize)> {
    let mut it = line.split(',').map(str::trim);
    let (Some(r), Some(c), None) = (it.next(), it.next(), it.next()) else {
        return Err(Error::Parse(format!("header must be `rows,cols`, got `{line}`")));
    };
    let r: usize = r.parse().map_err(|_| Error::Parse(format!("bad row count `{r}`")))?;
    let c: usize = c.parse().map_err(|_| Error::Parse(format!("bad column count `{c}`")))?;
    if r == 0 || c == 0 {
        return Err(Error::Parse("matrix dimensions must be positive".into()));
    }
    Ok((r, c))
}

pub fn parse_csv(text: &str) -> Result<Matrix> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Parse("empty file".into()))?;
    let (rows, cols) = parse_dims(header)?;
    let mut data = Vec::with_capacity(rows * cols);
    for (i, line) in lines.enumerate() {
        if i >= rows {
            return Err(Error::Parse(format!("more than {rows} data rows")));
        }
        let before = data.len();
        for tok in line.split(',') {
            let tok = tok.trim();
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::Parse(format!("row {}: `{tok}` is not a number", i + 1)))?;
            data.push(v);
        }
        if data.len() - before != cols {
            return Err(Error::Parse(format!("row {} has {} entries, expected {cols}", i + 1, data.len() - before)));
        }
    }
    if data.len() != rows * cols {
        return Err(Error::Parse(format!("expected {rows} data rows, got {}", data.len() / cols)));
    }
    matrix_from_row_major(rows, cols, &data).map_err(|e| match e {
        Error::NonFinite { row, col } => Error::Parse(format!("non-finite entry at ({row}, {col})")),
        other => other,
    })
}

pub fn parse_binary(bytes: &[u8]) -> Result<Matrix> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::Parse("missing LRDM header".into()));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::Parse("matrix dimensions must be positive".into()));
    }
    let body = &bytes[12..];
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::Parse("dimensions overflow".into()))?;
    if body.len() != expected {
        return Err(Error::Parse(format!("payload has {} bytes, expected {expected}", body.len())));
    }
    let data: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    matrix_from_row_major(rows, cols, &data).map_err(|e| match e {
        Error::NonFinite { row, col } => Error::Parse(format!("non-finite entry at ({row}, {col})")),
        other => other,
    })
}

/// CSV text with round-trippable decimal literals.
pub fn to_csv(m: &Matrix) -> String {
    let mut s = format!("{},{}\n", m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:e}", m[(i, j)])).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

pub fn to_binary(m: &Matrix) -> Result<Vec<u8>> {
    let rows = u32::try_from(m.nrows()).map_err(|_| Error::BadDimensions("too many rows".into()))?;
    let cols = u32::try_from(m.ncols()).map_err(|_| Error::BadDimensions("too many columns".into()))?;
    let mut out = Vec::with_capacity(12 + 8 * m.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    for v in to_row_major(m) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Writes CSV when the extension is `csv`, binary otherwise.
pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    let bytes = match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("csv") => to_csv(m).into_bytes(),
        _ => to_binary(m)?,
    };
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}
