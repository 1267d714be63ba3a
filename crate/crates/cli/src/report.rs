//! Aggregation of run manifests into a pass/fail table and plot-ready curves.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use crate::output::{RunManifest, MANIFEST};

pub const REPORT_DIR: &str = "report";

#[derive(Debug, Clone, PartialEq)]
pub struct RunRow {
    /// Run directory relative to the scanned root.
    pub run: String,
    pub manifest: RunManifest,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    /// Failed runs first, then passing ones, each in path order.
    pub rows: Vec<RunRow>,
    /// Manifests that could not be parsed.
    pub unreadable: Vec<String>,
    /// Curves copied into the report directory.
    pub curves: Vec<String>,
}

impl Report {
    pub fn to_text(&self) -> String {
        if self.rows.is_empty() && self.unreadable.is_empty() {
            return "no runs found\n".into();
        }
        let failed = self.rows.iter().filter(|r| !r.manifest.passed).count();
        let mut out = format!("{} runs, {} failed\n", self.rows.len(), failed);
        for r in &self.rows {
            let m = &r.manifest;
            let status = if m.passed { "PASS" } else { "FAIL" };
            out.push_str(&format!("{status}  {:<12} {}", m.subcommand, r.run));
            if !m.passed {
                out.push_str(&format!("  [{}]", m.failures.join("; ")));
            }
            out.push('\n');
        }
        for u in &self.unreadable {
            out.push_str(&format!("??    unreadable manifest {u}\n"));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("run,subcommand,seed,passed,failures\n");
        for r in &self.rows {
            let m = &r.manifest;
            out.push_str(&format!(
                "{},{},{},{},\"{}\"\n",
                r.run,
                m.subcommand,
                m.seed,
                m.passed,
                m.failures.join("; ").replace('"', "'")
            ));
        }
        out
    }
}

fn find_manifests(dir: &Path, out: &mut Vec<PathBuf>) -> io::Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        if e.file_type()?.is_dir() {
            if e.file_name() != REPORT_DIR {
                find_manifests(&path, out)?;
            }
        } else if e.file_name() == MANIFEST {
            out.push(path);
        }
    }
    Ok(())
}

/// True for CSV curves carrying a `bound` column.
fn has_bound_overlay(csv: &str) -> bool {
    csv.lines().next().is_some_and(|h| h.split(',').any(|c| c == "bound"))
}

/// Scans `root` for run manifests and writes `report/summary.csv`,
/// `report/summary.txt` and copies of curves with bound overlays.
pub fn report(root: &Path) -> io::Result<Report> {
    let mut paths = Vec::new();
    if root.is_dir() {
        find_manifests(root, &mut paths)?;
    }
    let mut rep = Report::default();
    let report_dir = root.join(REPORT_DIR);
    let curves_dir = report_dir.join("curves");
    if curves_dir.exists() {
        fs::remove_dir_all(&curves_dir)?;
    }
    for path in paths {
        let run_dir = path.parent().expect("manifest has a parent");
        let run = run_dir.strip_prefix(root).unwrap_or(run_dir).display().to_string();
        let parsed = fs::read_to_string(&path)
            .ok()
            .and_then(|t| serde_json::from_str::<RunManifest>(&t).ok());
        let Some(manifest) = parsed else {
            rep.unreadable.push(run);
            continue;
        };
        for f in &manifest.files {
            if !f.name.ends_with(".csv") {
                continue;
            }
            let Ok(text) = fs::read_to_string(run_dir.join(&f.name)) else { continue };
            if has_bound_overlay(&text) {
                let name = format!("{}__{}", run.replace(['/', '\\'], "__"), f.name);
                fs::create_dir_all(&curves_dir)?;
                fs::write(curves_dir.join(&name), text)?;
                rep.curves.push(name);
            }
        }
        rep.rows.push(RunRow { run, manifest });
    }
    rep.rows.sort_by(|a, b| a.manifest.passed.cmp(&b.manifest.passed).then(a.run.cmp(&b.run)));
    fs::create_dir_all(&report_dir)?;
    fs::write(report_dir.join("summary.csv"), rep.to_csv())?;
    fs::write(report_dir.join("summary.txt"), rep.to_text())?;
    Ok(rep)
}
