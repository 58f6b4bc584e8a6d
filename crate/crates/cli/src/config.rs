//! JSON run configurations, one document per command. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use quasigee_core::simulation::QFamily;
use quasigee_core::{GeneratorConfig, Link, MethodSpec, SolverSettings};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    /// Dataset CSV; relative paths resolve against the config file's directory.
    pub data: PathBuf,
    pub link: Link,
    pub method: MethodSpec,
    #[serde(default)]
    pub solver: SolverSettings,
    #[serde(default, skip_serializing)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnoseConfig {
    pub data: PathBuf,
    pub link: Link,
    pub method: MethodSpec,
    /// Ball center; defaults to the fitted estimate.
    #[serde(default)]
    pub center: Option<Vec<f64>>,
    #[serde(default = "default_r")]
    pub r: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_ball_samples")]
    pub ball_samples: usize,
    #[serde(default)]
    pub seed: u64,
    /// Prefix sizes; defaults to a doubling grid ending at `n`.
    #[serde(default)]
    pub n_grid: Option<Vec<usize>>,
    /// Radii for the `η(r)` slope; defaults to `r/4, r/2, r`.
    #[serde(default)]
    pub r_grid: Option<Vec<f64>>,
    #[serde(default)]
    pub c0: Option<f64>,
    #[serde(default = "default_param_bound")]
    pub param_bound: f64,
    #[serde(default)]
    pub solver: SolverSettings,
    #[serde(default, skip_serializing)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub replication: u64,
    #[serde(default, skip_serializing)]
    pub out: Option<PathBuf>,
}

pub const MIN_COMPARE_REPS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    pub generator: GeneratorConfig,
    pub methods: Vec<MethodSpec>,
    pub reps: usize,
    /// Defaults to `[generator.n]`.
    #[serde(default)]
    pub n_grid: Option<Vec<usize>>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub solver: SolverSettings,
    /// Optional quasi-score identity checks, run with `quasi_score_reps` replications.
    #[serde(default)]
    pub quasi_score: Vec<QFamily>,
    #[serde(default)]
    pub quasi_score_reps: Option<usize>,
    #[serde(default, skip_serializing)]
    pub out: Option<PathBuf>,
}

fn default_r() -> f64 {
    0.1
}

fn default_delta() -> f64 {
    0.1
}

fn default_ball_samples() -> usize {
    32
}

fn default_param_bound() -> f64 {
    1.0
}

impl CompareConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.reps < MIN_COMPARE_REPS {
            return Err(CliError::Config(format!("reps = {} is below the minimum of {MIN_COMPARE_REPS}", self.reps)));
        }
        if self.methods.is_empty() {
            return Err(CliError::Config("methods must not be empty".into()));
        }
        Ok(())
    }
}

impl DiagnoseConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if !(self.r > 0.0) || self.ball_samples == 0 || !(self.delta > 0.0) {
            return Err(CliError::Config("need r > 0, delta > 0 and ball_samples >= 1".into()));
        }
        Ok(())
    }
}

/// A parsed config with its canonical hash.
pub struct Loaded<T> {
    pub config: T,
    pub hash: String,
    pub base: PathBuf,
}

pub fn load<T: DeserializeOwned + Serialize>(path: &Path) -> Result<Loaded<T>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let config: T = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let canonical = serde_json::to_vec(&config).expect("config serializes");
    let hash = hex::encode(Sha256::digest(&canonical));
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Loaded { config, hash, base })
}

pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
