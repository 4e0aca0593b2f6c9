//! Result files and the run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use gazelab::report::Table;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub arguments: Vec<String>,
    pub inputs: Vec<String>,
    pub model: Option<String>,
    pub correlation: Option<serde_json::Value>,
    pub options: serde_json::Value,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub started_at: String,
    pub finished_at: String,
    pub outputs: Vec<String>,
    pub converged: bool,
}

impl RunManifest {
    pub fn new(command: &str, inputs: Vec<String>, options: serde_json::Value) -> Self {
        Self {
            command: command.into(),
            arguments: std::env::args().collect(),
            inputs,
            model: None,
            correlation: None,
            options,
            seed: None,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            started_at: now(),
            finished_at: String::new(),
            outputs: Vec::new(),
            converged: false,
        }
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// Collects files written into one output directory and finally the
/// manifest that lists them.
pub struct OutputDir {
    dir: PathBuf,
    written: Vec<String>,
}

impl OutputDir {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<(), CliError> {
        let path = self.path(name);
        fs::write(&path, text).map_err(|e| io_error(&path, e))?;
        self.written.push(name.to_string());
        Ok(())
    }

    /// Writes `value` as JSON together with a reference to the manifest.
    pub fn write_json<T: Serialize>(&mut self, name: &str, key: &str, value: &T) -> Result<(), CliError> {
        let mut doc = serde_json::Map::new();
        doc.insert("manifest".into(), MANIFEST.into());
        doc.insert(
            key.into(),
            serde_json::to_value(value).map_err(|e| CliError::Io(e.to_string()))?,
        );
        let text = serde_json::to_string_pretty(&doc).map_err(|e| CliError::Io(e.to_string()))?;
        self.write_text(name, &(text + "\n"))
    }

    /// `<stem>.json` (structured) and `<stem>.txt` (rendered).
    pub fn write_table(&mut self, stem: &str, table: &Table) -> Result<(), CliError> {
        self.write_json(&format!("{stem}.json"), "table", table)?;
        self.write_text(
            &format!("{stem}.txt"),
            &format!("# manifest: {MANIFEST}\n{}", table.render()),
        )
    }

    pub fn record(&mut self, name: &str) {
        self.written.push(name.to_string());
    }

    pub fn finish(self, mut manifest: RunManifest, converged: bool) -> Result<(), CliError> {
        manifest.outputs = self.written;
        manifest.converged = converged;
        manifest.finished_at = now();
        let path = self.dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Io(e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| io_error(&path, e))
    }
}

pub fn print_tables(tables: &[&Table], structured: bool) {
    if structured {
        println!("{}", serde_json::to_string_pretty(tables).unwrap_or_default());
    } else {
        for t in tables {
            println!("{}", t.render());
        }
    }
}
