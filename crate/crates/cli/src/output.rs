//! Run directories, artifact inventory and manifests.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::hex;

pub const MANIFEST: &str = "manifest.json";
pub const SUMMARY: &str = "summary.json";
pub const DATA: &str = "data.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub operation: String,
    pub seconds: f64,
}

/// One pass/fail check of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed, detail: detail.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: String,
    pub config_hash: String,
    pub code_version: String,
    pub seed: u64,
    pub timings: Vec<Timing>,
    pub files: Vec<FileEntry>,
    pub checks: Vec<Check>,
    pub passed: bool,
    /// Names of the failed checks.
    pub failures: Vec<String>,
}

/// Collects the files and timings of one run in a fixed directory.
#[derive(Debug)]
pub struct RunDir {
    dir: PathBuf,
    files: Vec<FileEntry>,
    timings: Vec<Timing>,
}

impl RunDir {
    /// `<out>/<subcommand>/<name>`, emptied of earlier artifacts.
    pub fn create(out: &Path, subcommand: &str, name: &str) -> io::Result<Self> {
        let dir = out.join(subcommand).join(name);
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir_all(&dir)?;
        Ok(Self { dir, files: Vec::new(), timings: Vec::new() })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, name: &str, contents: &str) -> io::Result<()> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, contents)?;
        self.files.push(FileEntry {
            name: name.to_string(),
            bytes: contents.len() as u64,
            sha256: hex(&Sha256::digest(contents.as_bytes())),
        });
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> io::Result<()> {
        let text = serde_json::to_string_pretty(value).map_err(io::Error::other)? + "\n";
        self.write(name, &text)
    }

    /// Runs `f` and records its wall time under `operation`.
    pub fn timed<T>(&mut self, operation: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.timings
            .push(Timing { operation: operation.into(), seconds: start.elapsed().as_secs_f64() });
        out
    }

    pub fn add_timing(&mut self, operation: &str, seconds: f64) {
        self.timings.push(Timing { operation: operation.into(), seconds });
    }

    /// Writes `manifest.json` and returns it.
    pub fn finish(
        mut self,
        subcommand: &str,
        config: &crate::config::LoadedConfig,
        checks: Vec<Check>,
    ) -> io::Result<RunManifest> {
        let failures: Vec<String> =
            checks.iter().filter(|c| !c.passed).map(|c| c.name.clone()).collect();
        let manifest = RunManifest {
            subcommand: subcommand.into(),
            config: config.path.display().to_string(),
            config_hash: config.hash.clone(),
            code_version: env!("CARGO_PKG_VERSION").into(),
            seed: config.config.seed,
            timings: std::mem::take(&mut self.timings),
            files: std::mem::take(&mut self.files),
            passed: failures.is_empty(),
            checks,
            failures,
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(io::Error::other)? + "\n";
        fs::write(self.dir.join(MANIFEST), text)?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn files_are_inventoried_with_hashes() {
        let tmp = tempfile::tempdir().unwrap();
        let mut run = RunDir::create(tmp.path(), "demo", "x-s1").unwrap();
        run.write("data.csv", "a,b\n").unwrap();
        run.write("sub/extra.csv", "c\n").unwrap();
        assert_eq!(run.files.len(), 2);
        assert_eq!(
            run.files[0].sha256,
            "5be08c9684a1d25efcee09318204824278b08bbfb4aef973ffefd0b9d7478313"
        );
        assert!(tmp.path().join("demo/x-s1/sub/extra.csv").exists());
    }
}
