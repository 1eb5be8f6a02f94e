//! Output emission: CSV tables plus a JSON run manifest listing every file
//! with a content hash.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dfm_core::error::Result;
use dfm_core::rng::fnv1a_64;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestFile {
    pub path: String,
    pub bytes: u64,
    pub content_hash: String,
}

/// Run manifest: configuration hash, seeds, versions, wall time, and the
/// hashed output inventory. Everything except `wall_ms` is deterministic.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub tool_version: String,
    pub wall_ms: u128,
    pub files: Vec<ManifestFile>,
}

impl Manifest {
    pub fn new(config_json: &str, seeds: Vec<u64>, wall_ms: u128) -> Self {
        Manifest {
            config_hash: format!("{:016x}", fnv1a_64(config_json.as_bytes())),
            seeds,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            wall_ms,
            files: Vec::new(),
        }
    }

    /// Hash and record an already-written output file.
    pub fn record(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path)?;
        self.files.push(ManifestFile {
            path: path
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| path.display().to_string()),
            bytes: bytes.len() as u64,
            content_hash: format!("{:016x}", fnv1a_64(&bytes)),
        });
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(serde_json::to_string_pretty(self)?.as_bytes())?;
        f.write_all(b"\n")?;
        Ok(())
    }
}

/// Create the output directory and return its path.
pub fn ensure_out_dir(dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    Ok(dir.to_path_buf())
}

/// Write CSV rows (already formatted) under a header line.
pub fn write_csv_lines(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{header}")?;
    for row in rows {
        writeln!(f, "{row}")?;
    }
    Ok(())
}
