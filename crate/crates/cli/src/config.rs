//! Experiment configuration: JSON schema, overrides and validation.

use std::path::{Path, PathBuf};

use rcm_core::ensemble::{Ensemble, EnsembleSpec};
use rcm_core::observable::{Observable, TrigPoly};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}: invalid JSON: {message}")]
    Syntax { path: PathBuf, message: String },
    /// A schema violation at `at`, a dotted path into the document.
    #[error("{path}: schema error at `{at}`: {message}")]
    Schema { path: PathBuf, at: String, message: String },
    #[error("bad override `{0}`: expected key=value with a dotted key")]
    Override(String),
}

/// Threshold `K` for the coupling classes: a number, or `"auto"` for one
/// unit above the smallest admissible value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Threshold {
    Value(f64),
    Auto(AutoTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoTag {
    Auto,
}

impl Threshold {
    pub fn value(self) -> Option<f64> {
        match self {
            Threshold::Value(k) => Some(k),
            Threshold::Auto(_) => None,
        }
    }
}

impl Default for Threshold {
    fn default() -> Self {
        Threshold::Auto(AutoTag::Auto)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StationaryConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub histogram_steps: usize,
    pub bins: usize,
    pub batches: usize,
}

impl Default for StationaryConfig {
    fn default() -> Self {
        Self { tol: 1e-12, max_iter: 20_000, histogram_steps: 10_000_000, bins: 64, batches: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MomentsConfig {
    /// Largest `n` in the `E[R_n^2]` table.
    pub n_max: usize,
    /// Monte Carlo sequences per `n` (finite laws only).
    pub samples: usize,
}

impl Default for MomentsConfig {
    fn default() -> Self {
        Self { n_max: 10, samples: 100_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CouplingConfig {
    pub k: Threshold,
    pub k_dprime: f64,
    pub horizon: usize,
    pub sequences: usize,
    /// Rate `t` for the coupling-count tail; defaults to the theoretical one.
    pub t: Option<f64>,
    /// Logarithms of the two initial densities (normalized after `exp`).
    pub log_psi: [TrigPoly; 2],
}

impl Default for CouplingConfig {
    fn default() -> Self {
        Self {
            k: Threshold::default(),
            k_dprime: 1.0,
            horizon: 50,
            sequences: 100,
            t: None,
            log_psi: [TrigPoly::cos_mode(1).scaled(0.15), TrigPoly::cos_mode(1).scaled(-0.15)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RdeConfig {
    /// Explicit `(weight, A, B)` atoms; defaults to `(1/lambda, Delta)` of
    /// the ensemble.
    pub law: Option<Vec<[f64; 3]>>,
    pub ell: f64,
    pub k: Threshold,
    pub n_max: usize,
    pub samples: usize,
}

impl Default for RdeConfig {
    fn default() -> Self {
        Self { law: None, ell: 8.0, k: Threshold::default(), n_max: 60, samples: 100_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrelationConfig {
    pub n_max: usize,
    pub samples: usize,
    /// Second observable; defaults to the first component of `observable`.
    pub g: Option<TrigPoly>,
}

impl Default for CorrelationConfig {
    fn default() -> Self {
        Self { n_max: 20, samples: 100_000, g: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CovarianceConfig {
    pub tail_tol: f64,
    pub m_max: usize,
    pub n: usize,
    pub batches: usize,
    /// Horizons of the variance-growth check.
    pub growth_n: Vec<usize>,
    pub growth_samples: usize,
}

impl Default for CovarianceConfig {
    fn default() -> Self {
        Self {
            tail_tol: 1e-9,
            m_max: 10_000,
            n: 2048,
            batches: 4096,
            growth_n: vec![64, 256, 1024],
            growth_samples: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CltConfig {
    pub n: usize,
    pub samples: usize,
    pub replications: usize,
}

impl Default for CltConfig {
    fn default() -> Self {
        Self { n: 4096, samples: 10_000, replications: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoboundaryConfig {
    pub m_max: usize,
}

impl Default for CoboundaryConfig {
    fn default() -> Self {
        Self { m_max: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MultiCorrConfig {
    pub m: usize,
    pub k: usize,
    /// One tilt for every factor, or `m + k + 1` tilts.
    pub t: Vec<f64>,
    pub n_max: usize,
    pub samples: usize,
    pub epsilon: f64,
    pub holder: f64,
}

impl Default for MultiCorrConfig {
    fn default() -> Self {
        Self { m: 2, k: 2, t: vec![0.1], n_max: 30, samples: 1_000_000, epsilon: 0.2, holder: 10.0 }
    }
}

fn default_grid() -> usize {
    4096
}

fn default_alpha() -> f64 {
    0.5
}

fn default_observable() -> Observable {
    Observable::scalar(TrigPoly::cos_mode(1))
}

/// One experiment. `seed` and `ensemble` are required; every other section
/// has defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub ensemble: EnsembleSpec,
    #[serde(default = "default_grid")]
    pub grid: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_observable")]
    pub observable: Observable,
    /// Projection direction `v`; defaults to the first coordinate axis.
    #[serde(default)]
    pub direction: Option<Vec<f64>>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub stationary: StationaryConfig,
    #[serde(default)]
    pub moments: MomentsConfig,
    #[serde(default)]
    pub coupling: CouplingConfig,
    #[serde(default)]
    pub rde: RdeConfig,
    #[serde(default)]
    pub correlation: CorrelationConfig,
    #[serde(default)]
    pub covariance: CovarianceConfig,
    #[serde(default)]
    pub clt: CltConfig,
    #[serde(default)]
    pub coboundary: CoboundaryConfig,
    #[serde(default)]
    pub multi_corr: MultiCorrConfig,
}

/// A parsed configuration with its provenance.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub path: PathBuf,
    /// File stem, used to name output directories.
    pub stem: String,
    /// SHA-256 of the canonical JSON of `config` after overrides.
    pub hash: String,
}

impl ExperimentConfig {
    pub fn direction(&self) -> Vec<f64> {
        self.direction.clone().unwrap_or_else(|| {
            let mut v = vec![0.0; self.observable.dim()];
            v[0] = 1.0;
            v
        })
    }

    pub fn build_ensemble(&self) -> Result<Ensemble, rcm_core::ensemble::EnsembleError> {
        self.ensemble.build(self.seed)
    }

    /// Checks that JSON cannot express: value ranges and dimensions.
    fn validate(&self) -> Result<(), (String, String)> {
        let err = |at: &str, m: String| Err((at.to_string(), m));
        if !(self.grid >= 16 && self.grid.is_power_of_two()) {
            return err("grid", format!("must be a power of two >= 16, got {}", self.grid));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return err("alpha", format!("must lie in (0, 1], got {}", self.alpha));
        }
        if self.observable.components.is_empty() {
            return err("observable.components", "must not be empty".into());
        }
        if let Some(v) = &self.direction {
            if v.len() != self.observable.dim() {
                return err(
                    "direction",
                    format!(
                        "has {} entries for a {}-dimensional observable",
                        v.len(),
                        self.observable.dim()
                    ),
                );
            }
        }
        if self.stationary.bins == 0 || !self.grid.is_multiple_of(self.stationary.bins) {
            return err("stationary.bins", "must divide the grid size".into());
        }
        if self.covariance.growth_n.len() < 3 {
            return err("covariance.growth_n", "needs at least three horizons".into());
        }
        let mc = &self.multi_corr;
        let factors = mc.m + mc.k + 1;
        if mc.k == 0 {
            return err("multi_corr.k", "must be at least 1".into());
        }
        if mc.t.len() != 1 && mc.t.len() != factors {
            return err("multi_corr.t", format!("needs 1 or {factors} entries"));
        }
        Ok(())
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), ConfigError> {
    let bad = || ConfigError::Override(format!("{key}=..."));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(bad());
    }
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(bad)?;
        if i + 1 == parts.len() {
            obj.insert((*part).to_string(), value);
            return Ok(());
        }
        node = obj.entry((*part).to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

/// Applies `key=value` overrides; values parse as JSON when they can and
/// are taken as strings otherwise.
pub fn apply_overrides(doc: &mut Value, overrides: &[String]) -> Result<(), ConfigError> {
    for o in overrides {
        let (key, raw) = o.split_once('=').ok_or_else(|| ConfigError::Override(o.clone()))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        set_path(doc, key.trim(), value)?;
    }
    Ok(())
}

/// Parses and validates a configuration document.
pub fn parse(doc: Value, path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let config: ExperimentConfig = serde_path_to_error::deserialize(doc).map_err(|e| {
        let at = e.path().to_string();
        ConfigError::Schema { path: path.to_path_buf(), at, message: e.into_inner().to_string() }
    })?;
    config.validate().map_err(|(at, message)| ConfigError::Schema {
        path: path.to_path_buf(),
        at,
        message,
    })?;
    Ok(config)
}

/// Reads `path`, applies overrides and command-line settings, and
/// validates the result.
pub fn load(
    path: &Path,
    overrides: &[String],
    seed: Option<u64>,
    grid: Option<usize>,
) -> Result<LoadedConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
    let mut doc: Value = serde_json::from_str(&text)
        .map_err(|e| ConfigError::Syntax { path: path.to_path_buf(), message: e.to_string() })?;
    if !doc.is_object() {
        return Err(ConfigError::Schema {
            path: path.to_path_buf(),
            at: ".".into(),
            message: "the document must be a JSON object".into(),
        });
    }
    apply_overrides(&mut doc, overrides)?;
    if let Some(s) = seed {
        set_path(&mut doc, "seed", Value::from(s))?;
    }
    if let Some(n) = grid {
        set_path(&mut doc, "grid", Value::from(n))?;
    }
    let config = parse(doc, path)?;
    let canonical = serde_json::to_string(&config).expect("config serializes");
    let hash = hex(&Sha256::digest(canonical.as_bytes()));
    let stem = path.file_stem().map_or("config".into(), |s| s.to_string_lossy().into_owned());
    Ok(LoadedConfig { config, path: path.to_path_buf(), stem, hash })
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn parse_value(v: Value) -> Result<ExperimentConfig, ConfigError> {
        parse(v, Path::new("test.json"))
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse_value(json!({
            "seed": 3,
            "ensemble": {"atoms": [{"weight": 1.0, "kind": "linear", "d": 2}]}
        }))
        .unwrap();
        assert_eq!(c.grid, 4096);
        assert_eq!(c.coupling.k, Threshold::Auto(AutoTag::Auto));
        assert_eq!(c.direction(), vec![1.0]);
    }

    #[test]
    fn schema_errors_name_the_path() {
        let e = parse_value(json!({"seed": 1})).unwrap_err().to_string();
        assert!(e.contains("missing field `ensemble`"), "{e}");
        let e = parse_value(json!({
            "seed": 1,
            "ensemble": {"atoms": [{"weight": 1.0, "d": 2}]}
        }))
        .unwrap_err()
        .to_string();
        assert!(e.contains("ensemble.atoms[0]") && e.contains("kind"), "{e}");
        let e = parse_value(json!({
            "seed": 1, "grid": 1000,
            "ensemble": {"atoms": [{"weight": 1.0, "kind": "linear", "d": 2}]}
        }))
        .unwrap_err()
        .to_string();
        assert!(e.contains("`grid`"), "{e}");
    }

    #[test]
    fn overrides_set_nested_values() {
        let mut v = json!({"seed": 1, "coupling": {"horizon": 50}});
        apply_overrides(
            &mut v,
            &["coupling.horizon=20".into(), "coupling.k=4.5".into(), "rde.k=auto".into()],
        )
        .unwrap();
        assert_eq!(v["coupling"]["horizon"], json!(20));
        assert_eq!(v["coupling"]["k"], json!(4.5));
        assert_eq!(v["rde"]["k"], json!("auto"));
        assert!(apply_overrides(&mut v, &["nokey".into()]).is_err());
    }
}
