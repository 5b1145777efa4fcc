//! Run manifests: what was run, from which inputs, producing which bytes.
//!
//! Every subcommand writes `manifest.json` next to its artifacts. The
//! manifest pins the scenario digest, the effective seeds, and a SHA-256
//! digest of every produced file, so a run is reproducible byte-for-byte
//! from (scenario, seeds, tool version) and any drift is visible as a
//! digest mismatch.

use mpp_bsde::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Clone, Debug, Serialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckLine {
    pub check: String,
    pub scenario: String,
    pub pass: bool,
    pub expected_fail: bool,
    /// `pass` after accounting for expected-fail fixtures.
    pub effective_pass: bool,
    pub worst_margin: f64,
    pub tolerance: f64,
}

#[derive(Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub scenario_path: String,
    pub scenario_sha256: String,
    pub scenario_name: String,
    pub seed_base: u64,
    pub seed_offset: u64,
    pub seed_effective: u64,
    pub files: Vec<FileRecord>,
    pub checks: Vec<CheckLine>,
    pub wall_clock_seconds: f64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Accumulates artifacts for one run and finalizes the manifest.
pub struct RunRecorder {
    out_dir: PathBuf,
    manifest: RunManifest,
    started: Instant,
}

impl RunRecorder {
    pub fn new(
        command: &str,
        out_dir: &Path,
        scenario_path: &Path,
        scenario_bytes: &[u8],
        scenario_name: &str,
        seed_base: u64,
        seed_offset: u64,
    ) -> Result<Self> {
        fs::create_dir_all(out_dir).map_err(|e| {
            Error::Validation(format!("cannot create out dir {}: {e}", out_dir.display()))
        })?;
        Ok(Self {
            out_dir: out_dir.to_path_buf(),
            manifest: RunManifest {
                tool: "mppbsde",
                version: env!("CARGO_PKG_VERSION"),
                command: command.to_string(),
                scenario_path: scenario_path.display().to_string(),
                scenario_sha256: sha256_hex(scenario_bytes),
                scenario_name: scenario_name.to_string(),
                seed_base,
                seed_offset,
                seed_effective: seed_base.wrapping_add(seed_offset),
                files: Vec::new(),
                checks: Vec::new(),
                wall_clock_seconds: 0.0,
            },
            started: Instant::now(),
        })
    }

    /// Write one artifact into the out dir and record its digest.
    pub fn write_file(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.out_dir.join(name);
        fs::write(&path, bytes)
            .map_err(|e| Error::Numerical(format!("cannot write {}: {e}", path.display())))?;
        self.manifest.files.push(FileRecord {
            path: name.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)
            .map_err(|e| Error::Numerical(format!("cannot serialize {name}: {e}")))?;
        bytes.push(b'\n');
        self.write_file(name, &bytes)
    }

    pub fn record_check(&mut self, line: CheckLine) {
        self.manifest.checks.push(line);
    }

    /// Write `manifest.json` and return the finished manifest.
    pub fn finish(mut self) -> Result<RunManifest> {
        self.manifest.wall_clock_seconds = self.started.elapsed().as_secs_f64();
        let bytes = serde_json::to_vec_pretty(&self.manifest)
            .map_err(|e| Error::Numerical(format!("cannot serialize manifest: {e}")))?;
        let path = self.out_dir.join("manifest.json");
        fs::write(&path, bytes)
            .map_err(|e| Error::Numerical(format!("cannot write {}: {e}", path.display())))?;
        Ok(self.manifest)
    }
}
