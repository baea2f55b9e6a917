//! File output. Each command collects its artifacts in memory and hands them
//! to one [`OutputDir`], so a directory only ever has a single writer and a
//! failed command leaves no half-written set behind.

use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::Serialize;

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

pub struct OutputDir {
    root: PathBuf,
}

impl OutputDir {
    /// Creates `root` (and parents). Failure is an invocation error.
    pub fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root)
            .map_err(|e| CliError::Input(format!("cannot create output directory {}: {e}", root.display())))?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf, CliError> {
        let path = self.root.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(CliError::io(parent))?;
        }
        fs::write(&path, contents).map_err(CliError::io(&path))?;
        log::debug!("wrote {}", path.display());
        Ok(path)
    }

    pub fn write_json<T: Serialize + ?Sized>(&self, name: &str, value: &T) -> Result<PathBuf, CliError> {
        self.write(name, to_json(value))
    }

    /// Writes `rows` as `<stem>.csv` or `<stem>.json` depending on `format`.
    pub fn write_table<T: Serialize>(&self, stem: &str, rows: &[T], format: Format) -> Result<PathBuf, CliError> {
        let name = format!("{stem}.{}", format.extension());
        match format {
            Format::Json => self.write_json(&name, rows),
            Format::Csv => self.write(&name, to_csv(rows)?),
        }
    }
}

pub fn to_json<T: Serialize + ?Sized>(value: &T) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
    text.push('\n');
    text
}

pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| CliError::Fault(format!("cannot encode CSV row: {e}")))?;
    }
    w.into_inner().map_err(|e| CliError::Fault(format!("cannot encode CSV: {e}")))
}
