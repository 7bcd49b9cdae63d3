//! Line-delimited JSON record files.
//!
//! Every data artifact the pipeline reads or writes is one JSON object per
//! line. Output files produced by the CLI start with a single meta line of
//! the form `{"config_echo": {...}}` recording the effective configuration;
//! readers here skip such lines transparently.

use serde::de::DeserializeOwned;
use serde::Serialize;
use std::io::{BufRead, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Record {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

/// True for meta lines carrying only the effective-config echo.
pub fn is_meta_value(value: &serde_json::Value) -> bool {
    value
        .as_object()
        .is_some_and(|obj| obj.contains_key("config_echo"))
}

/// Reads all records, failing on the first malformed line.
///
/// Meta lines and blank lines are skipped. Line numbers are 1-based.
pub fn read_all<T: DeserializeOwned, R: BufRead>(reader: R) -> Result<Vec<T>, JsonlError> {
    let mut out = Vec::new();
    for item in iter_records(reader) {
        let (_, record) = item?;
        out.push(record);
    }
    Ok(out)
}

/// Iterates `(line_number, record)` results so callers can skip or report
/// malformed lines individually.
pub fn iter_records<T: DeserializeOwned, R: BufRead>(
    reader: R,
) -> impl Iterator<Item = Result<(usize, T), JsonlError>> {
    reader
        .lines()
        .enumerate()
        .filter_map(|(idx, line)| {
            let line_no = idx + 1;
            let text = match line {
                Ok(text) => text,
                Err(e) => return Some(Err(JsonlError::Io(e))),
            };
            if text.trim().is_empty() {
                return None;
            }
            let value: serde_json::Value = match serde_json::from_str(&text) {
                Ok(v) => v,
                Err(source) => return Some(Err(JsonlError::Record { line: line_no, source })),
            };
            if is_meta_value(&value) {
                return None;
            }
            match serde_json::from_value::<T>(value) {
                Ok(record) => Some(Ok((line_no, record))),
                Err(source) => Some(Err(JsonlError::Record { line: line_no, source })),
            }
        })
}

/// Writes one record as a JSON line.
pub fn write_record<T: Serialize, W: Write>(writer: &mut W, record: &T) -> Result<(), JsonlError> {
    let text = serde_json::to_string(record).map_err(|source| JsonlError::Record {
        line: 0,
        source,
    })?;
    writer.write_all(text.as_bytes())?;
    writer.write_all(b"\n")?;
    Ok(())
}

/// Writes the leading config-echo meta line.
pub fn write_config_echo<W: Write>(
    writer: &mut W,
    config: &serde_json::Value,
) -> Result<(), JsonlError> {
    write_record(writer, &serde_json::json!({ "config_echo": config }))
}
