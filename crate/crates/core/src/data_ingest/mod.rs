//! Parsing of case, mobility-trend and flow files into validated tables, and
//! assembly of per-node feature vectors.

mod cases;
mod features;
mod trends;

pub use cases::{
    compute_deltas, parse_cases, parse_populations, write_cases, write_populations, CaseRecord,
    CaseTable, CountySeries, Deltas,
};
pub use features::{
    build_features, numeric_width, FeatureNormalizer, FeatureSource, NodeFeatures,
    FLOW_SUMMARY_LEN, MOBILITY_LEN,
};
pub use trends::{parse_trends, write_trends, MobilityTrends, TREND_CATEGORIES};

use std::fs::File;
use std::io::{BufReader, BufWriter, Read};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Non-fatal findings reported while ingesting a file.
pub type Warnings = Vec<String>;

pub fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let mut text = String::new();
    open(path)?
        .read_to_string(&mut text)
        .map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes one pretty-printed JSON document, creating parent directories.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    use std::io::Write;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Line number (1-based, header is line 1) of a csv record.
pub(crate) fn csv_line(record: &csv::StringRecord, fallback: u64) -> u64 {
    record.position().map(|p| p.line()).unwrap_or(fallback)
}

/// Converts a csv error to a parse error carrying the offending line.
pub(crate) fn csv_error(e: csv::Error, fallback: u64) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(fallback);
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

/// Checks that a header row matches `expected` exactly (after trimming).
pub(crate) fn check_header(headers: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    let found: Vec<&str> = headers.iter().map(str::trim).collect();
    if found != expected {
        return Err(Error::Parse {
            line: 1,
            message: format!(
                "expected header {:?}, found {:?}",
                expected.join(","),
                found.join(",")
            ),
        });
    }
    Ok(())
}
