//! CSV conventions shared by every file the toolkit reads or writes: UTF-8,
//! `.` decimal separator, header line, `NA` for missing cells, and optional
//! leading `#` comment lines.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MISSING: &str = "NA";

pub(crate) fn reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(false)
        .from_reader(file))
}

/// Opens `path` for writing, emitting `# <comment>` as the first line when given.
pub(crate) fn writer(path: &Path, comment: Option<&str>) -> Result<csv::Writer<BufWriter<File>>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut buf = BufWriter::new(file);
    if let Some(c) = comment {
        writeln!(buf, "# {c}").map_err(|e| Error::io(path, e))?;
    }
    Ok(csv::WriterBuilder::new().from_writer(buf))
}

pub(crate) fn csv_err(path: &Path, err: csv::Error) -> Error {
    let line = err.position().map_or(0, |p| p.line());
    match err.into_kind() {
        csv::ErrorKind::Io(e) => Error::io(path, e),
        kind => Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("{kind:?}"),
        },
    }
}

pub(crate) fn flush<W: Write>(path: &Path, mut w: csv::Writer<W>) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        MISSING.to_string()
    } else {
        format!("{x:?}")
    }
}

/// Parses a finite number; `NA` maps to `None`.
pub(crate) fn parse_cell(cell: &str) -> std::result::Result<Option<f64>, String> {
    if cell == MISSING {
        return Ok(None);
    }
    match cell.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        _ => Err(format!("non-numeric cell `{cell}`")),
    }
}

/// Writes `key=value` lines after an optional `# comment` line.
pub(crate) fn write_kv(path: &Path, comment: Option<&str>, pairs: &[(String, String)]) -> Result<()> {
    let mut out = String::new();
    if let Some(c) = comment {
        out.push_str(&format!("# {c}\n"));
    }
    for (k, v) in pairs {
        out.push_str(&format!("{k}={v}\n"));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads `key=value` lines, skipping blanks and `#` comments. Later keys win.
pub fn read_kv(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: n as u64 + 1,
            message: format!("expected key=value, got `{line}`"),
        })?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}
