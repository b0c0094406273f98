//! CSV and JSON writers. Floats are written with 17 significant digits so
//! reruns can be compared byte for byte.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::CliError;

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn output_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Output { path: path.display().to_string(), msg: e.to_string() }
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| output_error(dir, e))
}

pub fn write_csv<I>(path: &Path, header: &[&str], rows: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = csv::Writer::from_path(path).map_err(|e| output_error(path, e))?;
    w.write_record(header).map_err(|e| output_error(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| output_error(path, e))?;
    }
    w.flush().map_err(|e| output_error(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| output_error(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| output_error(path, e))
}
