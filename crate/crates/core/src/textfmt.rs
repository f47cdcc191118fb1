//! Byte-stable text output for artifacts.
//!
//! All floats written to CSV/JSON artifacts carry 9 significant digits.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const SIG_DIGITS: usize = 9;

/// Formats like C's `%.9g`: shortest of fixed or scientific, trailing zeros trimmed.
pub fn fmt_g9(x: f64) -> String {
    if x.is_nan() {
        return "NaN".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{:.*e}", SIG_DIGITS - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -4 || exp >= SIG_DIGITS as i32 {
        let m = trim_zeros(mantissa);
        return format!("{m}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs());
    }
    let decimals = (SIG_DIGITS as i32 - 1 - exp).max(0) as usize;
    trim_zeros(&format!("{:.*}", decimals, x)).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Rounds to the value that `fmt_g9` would print.
pub fn round_g9(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{:.*e}", SIG_DIGITS - 1, x).parse().expect("round trip")
}

/// Writes `bytes` to `path` via a temp file in the same directory and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// CSV with header `{prefix}0,...,{prefix}{d-1}`.
pub fn matrix_to_csv(m: &Matrix, prefix: &str) -> String {
    let header: Vec<String> = (0..m.cols()).map(|j| format!("{prefix}{j}")).collect();
    let mut out = header.join(",");
    out.push('\n');
    for row in m.iter_rows() {
        let cells: Vec<String> = row.iter().map(|v| fmt_g9(*v)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Reads the `{prefix}0, {prefix}1, ...` columns of a CSV; other columns are ignored.
pub fn matrix_from_csv(reader: impl Read, prefix: &str) -> Result<Matrix> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Csv {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let cols: Vec<usize> = (0..)
        .map_while(|j| headers.iter().position(|h| h == format!("{prefix}{j}")))
        .collect();
    if cols.is_empty() {
        return Err(Error::Csv {
            line: 1,
            message: format!("no `{prefix}0` column"),
        });
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Csv {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        for &c in &cols {
            let s = rec.get(c).unwrap_or("");
            let v = s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Csv {
                line,
                message: format!("bad value `{s}`"),
            })?;
            data.push(v);
        }
        rows += 1;
    }
    Matrix::from_vec(rows, cols.len(), data)
}
