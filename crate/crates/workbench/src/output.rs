//! Output files. Everything is written through a temporary file and renamed,
//! and nothing written depends on the output location or wall-clock time, so
//! two runs with the same settings produce identical bytes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::CliError;

pub fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::config(format!("{}: {e}", path.display()))
}

pub fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| io_error(path, e))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| io_error(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_error(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("output serializes");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = toml::to_string_pretty(value).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    write_atomic(path, text.as_bytes())
}

/// Compact number for file names: `13.6`, `0`, `54.8`.
pub fn tag_number(v: f64) -> String {
    let s = format!("{v}");
    s.replace('-', "m")
}
