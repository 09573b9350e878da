//! Run manifests: every run writes manifest.json before any data file
//! (completed = false), then rewrites it after the run with the wall time.
//! A leftover completed = false marks a partial run. Data files never
//! contain timing, so they stay byte-deterministic.

use serde::Serialize;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: String,
    pub config_file: Option<String>,
    /// FNV-1a 64 of the raw config file bytes.
    pub config_hash: Option<String>,
    /// Sorted `section.key=value` lines after overrides.
    pub effective_config: Vec<String>,
    pub overrides: Vec<String>,
    pub seed: u64,
    pub threads: usize,
    pub check: bool,
    pub completed: bool,
    pub wall_time_s: Option<f64>,
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub struct ManifestWriter {
    path: PathBuf,
    manifest: Manifest,
    started: Instant,
}

impl ManifestWriter {
    /// Creates the output directory and writes the initial manifest.
    pub fn begin(out_dir: &Path, manifest: Manifest) -> anyhow::Result<Self> {
        fs::create_dir_all(out_dir)?;
        let path = out_dir.join("manifest.json");
        let w = Self {
            path,
            manifest,
            started: Instant::now(),
        };
        w.write()?;
        Ok(w)
    }

    fn write(&self) -> anyhow::Result<()> {
        let mut text = serde_json::to_string_pretty(&self.manifest)?;
        text.push('\n');
        fs::write(&self.path, text)?;
        Ok(())
    }

    /// Marks the run complete and records the wall time.
    pub fn finish(mut self) -> anyhow::Result<()> {
        self.manifest.completed = true;
        self.manifest.wall_time_s = Some(self.started.elapsed().as_secs_f64());
        self.write()
    }
}
