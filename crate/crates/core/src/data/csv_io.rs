use std::io::Read;
use std::path::Path;

use super::MultivariateSeries;
use crate::error::{Error, Result};

/// Reads a headed, comma-separated file of float channels.
///
/// When `date_column` names a header field, that column must exist, every
/// row must carry a non-empty value in it, and it is dropped from the
/// channels. All other columns must parse as finite floats.
pub fn load_csv(path: impl AsRef<Path>, date_column: Option<&str>) -> Result<MultivariateSeries> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "series".into());
    read_series(file, path, &name, date_column)
}

/// Name of the first header field when it looks like a timestamp column
/// (`date`, `time`, `timestamp`, `datetime`, `ds`, case-insensitive).
pub fn sniff_date_column(path: impl AsRef<Path>) -> Result<Option<String>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = reader.headers().map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        message: format!("unreadable header: {e}"),
    })?;
    Ok(headers.get(0).map(str::trim).and_then(|h| {
        matches!(h.to_ascii_lowercase().as_str(), "date" | "time" | "timestamp" | "datetime" | "ds").then(|| h.to_string())
    }))
}

fn read_series(
    input: impl Read,
    path: &Path,
    name: &str,
    date_column: Option<&str>,
) -> Result<MultivariateSeries> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let headers = reader
        .headers()
        .map_err(|e| parse_err(1, format!("unreadable header: {e}")))?
        .clone();
    if headers.is_empty() {
        return Err(parse_err(1, "missing header row".into()));
    }
    let date_idx = match date_column {
        Some(col) => Some(
            headers
                .iter()
                .position(|h| h.trim() == col)
                .ok_or_else(|| parse_err(1, format!("date column '{col}' not found in header")))?,
        ),
        None => None,
    };
    let channel_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != date_idx)
        .map(|(_, h)| h.trim().to_string())
        .collect();
    if channel_names.is_empty() {
        return Err(parse_err(1, "no value columns".into()));
    }

    let mut values = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, format!("malformed row: {e}"))
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        for (i, cell) in record.iter().enumerate() {
            if Some(i) == date_idx {
                if cell.trim().is_empty() {
                    return Err(parse_err(line, "empty date cell".into()));
                }
                continue;
            }
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("non-numeric cell '{cell}' in column '{}'", &headers[i])))?;
            if !v.is_finite() {
                return Err(parse_err(
                    line,
                    format!("non-finite value '{cell}' in column '{}'", &headers[i]),
                ));
            }
            values.push(v);
        }
    }
    if values.is_empty() {
        return Err(parse_err(2, "no data rows".into()));
    }
    MultivariateSeries::new(name, values, channel_names.len(), "unknown", channel_names)
}

/// Writes the series with a leading `date` column holding the step index.
pub fn write_csv(path: impl AsRef<Path>, series: &MultivariateSeries) -> Result<()> {
    let mut header = vec!["date".to_string()];
    header.extend(series.channel_names().iter().cloned());
    let rows: Vec<Vec<f64>> = (0..series.len())
        .map(|t| (0..series.channels()).map(|c| series.value(t, c)).collect())
        .collect();
    write_rows(path.as_ref(), &header, &rows, true)
}

/// Writes `rows` under `header` (no index column).
pub fn write_matrix_csv(path: impl AsRef<Path>, header: &[String], rows: &[Vec<f64>]) -> Result<()> {
    write_rows(path.as_ref(), header, rows, false)
}

fn write_rows(path: &Path, header: &[String], rows: &[Vec<f64>], index: bool) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let csv_err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    w.write_record(header).map_err(csv_err)?;
    for (t, row) in rows.iter().enumerate() {
        let mut rec: Vec<String> = Vec::with_capacity(row.len() + 1);
        if index {
            rec.push(t.to_string());
        }
        // `{:?}` prints the shortest string that round-trips exactly.
        rec.extend(row.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
