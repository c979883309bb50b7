use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use warpmix::{ChainConfig, Hyperparameters, RhoMode};

use crate::CliError;

/// Parse a TOML file strictly; unknown keys are usage errors.
pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

/// First 16 hex digits of the SHA-256 of the effective configuration.
pub fn config_hash<T: Serialize>(cfg: &T) -> Result<String, CliError> {
    let text = toml::to_string(cfg).map_err(|e| CliError::Usage(format!("cannot serialize config: {e}")))?;
    Ok(hex::encode(Sha256::digest(text.as_bytes()))[..16].to_string())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Knots {
    pub shape: usize,
    pub warp: usize,
}

impl Default for Knots {
    fn default() -> Self {
        Self { shape: 15, warp: 1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainSection {
    pub n_iter: usize,
    pub n_burnin: usize,
    pub thin: usize,
    pub seed: u64,
    pub initial_tau: f64,
    /// Hold ρ at this value instead of sampling it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixed_rho: Option<f64>,
    pub regression: bool,
}

impl Default for ChainSection {
    fn default() -> Self {
        let d = ChainConfig::default();
        Self {
            n_iter: d.n_iter,
            n_burnin: d.n_burnin,
            thin: d.thin,
            seed: d.seed,
            initial_tau: d.initial_tau,
            fixed_rho: None,
            regression: d.regression,
        }
    }
}

impl ChainSection {
    pub fn to_config(&self, stream: u64) -> ChainConfig {
        ChainConfig {
            n_iter: self.n_iter,
            n_burnin: self.n_burnin,
            thin: self.thin,
            seed: self.seed,
            stream,
            initial_tau: self.initial_tau,
            rho_mode: self.fixed_rho.map_or(RhoMode::Sampled, RhoMode::Fixed),
            regression: self.regression,
            project_constraints: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    #[default]
    None,
    /// `subject_id,label` file; defaults to `labels.csv` beside the data.
    File,
    Explicit,
    Heuristic,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct LabelSection {
    pub mode: LabelMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    pub feature1: Vec<String>,
    pub feature2: Vec<String>,
    pub peak_count: usize,
    pub noise_count: usize,
    /// Band of the noise heuristic, in original time units.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub band: Option<[f64; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    /// Long-format data file, a directory holding `data.csv`, or a
    /// directory of `rep_XXX` batches.
    pub data: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub covariates: Vec<String>,
    /// Map observed times affinely onto [0, 1] before fitting.
    pub rescale_time: bool,
    /// Fit `ln(1 + y)` instead of `y`.
    pub log_transform: bool,
    pub knots: Knots,
    pub hyperparameters: Hyperparameters,
    pub chain: ChainSection,
    pub labels: LabelSection,
}

impl FitConfig {
    /// Resolve relative paths against the directory of the config file.
    pub fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data);
        if let Some(o) = self.out.as_mut() {
            fix(o);
        }
        if let Some(f) = self.labels.file.as_mut() {
            fix(f);
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.data.as_os_str().is_empty() {
            return Err(CliError::Usage("config must set `data`".into()));
        }
        self.hyperparameters.validate()?;
        self.chain.to_config(0).validate()?;
        if self.labels.mode == LabelMode::Heuristic && self.labels.noise_count > 0 && self.labels.band.is_none() {
            return Err(CliError::Usage("heuristic noise labels need `labels.band`".into()));
        }
        if self.chain.regression && self.covariates.is_empty() {
            return Err(CliError::Usage("phase regression needs at least one covariate column".into()));
        }
        Ok(())
    }
}
