//! Run manifests and manifest-stamped CSV output.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::CliResult;

pub const TOOL: &str = "wqcp";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Prefix of the first line of every CSV file.
pub const CSV_MANIFEST_PREFIX: &str = "# manifest: ";

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub experiment: String,
    pub timestamp: String,
    /// SHA-256 of the tool version and the resolved config.
    pub manifest_hash: String,
    pub workers: usize,
    pub config: ExperimentConfig,
    pub derived: BTreeMap<String, serde_json::Value>,
    pub checks: Vec<Check>,
    pub files: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunManifest {
    pub fn all_pass(&self) -> bool {
        self.error.is_none() && self.checks.iter().all(|c| c.pass)
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }
}

pub fn manifest_hash(config: &ExperimentConfig) -> CliResult<String> {
    let canonical = serde_json::to_string(&(TOOL, VERSION, config))?;
    Ok(hex::encode(Sha256::digest(canonical.as_bytes())))
}

/// Writes `# manifest: <hash>`, a header row, then the records.
pub fn write_csv<I, R>(path: &Path, hash: &str, header: &[&str], rows: I) -> CliResult<PathBuf>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut file = BufWriter::new(File::create(path)?);
    writeln!(file, "{CSV_MANIFEST_PREFIX}{hash}")?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(path.to_path_buf())
}

/// Reads the manifest hash stamped on a CSV file.
pub fn read_csv_hash(path: &Path) -> CliResult<Option<String>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .next()
        .and_then(|l| l.strip_prefix(CSV_MANIFEST_PREFIX))
        .map(str::to_owned))
}
