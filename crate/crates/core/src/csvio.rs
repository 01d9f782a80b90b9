//! Small helpers shared by the CSV-based sidecar formats.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Real;

pub(crate) fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Lines starting with `#`, with the marker stripped.
pub(crate) fn comment_lines(text: &str) -> impl Iterator<Item = &str> {
    text.lines()
        .map(str::trim)
        .filter_map(|l| l.strip_prefix('#'))
        .map(str::trim)
}

/// Parses CSV records, skipping `#` comments and a leading non-numeric header row.
pub(crate) fn records(text: &str) -> Result<Vec<csv::StringRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
        if rec.iter().all(str::is_empty) {
            continue;
        }
        out.push(rec);
    }
    if let Some(first) = out.first() {
        if first.get(0).is_some_and(|f| f.parse::<f64>().is_err()) {
            out.remove(0);
        }
    }
    Ok(out)
}

pub(crate) fn field<T: Real>(rec: &csv::StringRecord, i: usize) -> Result<T> {
    let raw = rec
        .get(i)
        .ok_or_else(|| Error::Format(format!("missing column {i} in row {:?}", rec)))?;
    raw.parse::<T>()
        .map_err(|_| Error::Format(format!("not a number: {raw:?}")))
}

/// Reads a two-column `wavelength_nm,value` table.
pub(crate) fn spectrum_columns<T: Real>(text: &str) -> Result<(Vec<T>, Vec<T>)> {
    let mut wl = Vec::new();
    let mut vals = Vec::new();
    for rec in records(text)? {
        wl.push(field(&rec, 0)?);
        vals.push(field(&rec, 1)?);
    }
    Ok((wl, vals))
}

/// Formats a list with the shortest round-tripping representation of each value.
pub(crate) fn join<T: std::fmt::Display>(values: &[T]) -> String {
    values
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}
