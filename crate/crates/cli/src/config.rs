//! Run configuration: one TOML file with a table per concern.
//!
//! Precedence, lowest first: built-in defaults, the config file (`--config`
//! or the `BLOODNET_CONFIG` environment variable), then command-line flags.

use std::path::{Path, PathBuf};

use bloodnet::data::{BrainWindow, PhantomConfig};
use bloodnet::model::ArchConfig;
use bloodnet::tensor::DType;
use bloodnet::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const CONFIG_ENV: &str = "BLOODNET_CONFIG";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Bootstrap resamples for confidence intervals.
    pub n_bootstrap: usize,
    pub seed: u64,
    /// Windows per forward pass during inference.
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_bootstrap: bloodnet::eval::DEFAULT_BOOTSTRAP,
            seed: 0,
            batch_size: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Parameter precision for training: "f32" or "f64".
    pub dtype: String,
    pub phantom: PhantomConfig,
    pub window: BrainWindow,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dtype: "f32".into(),
            phantom: PhantomConfig::default(),
            window: BrainWindow::default(),
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
    }

    /// Read `path`, or the file named by `BLOODNET_CONFIG`, or fall back to
    /// defaults.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let path = match path {
            Some(p) => Some(p.to_path_buf()),
            None => std::env::var_os(CONFIG_ENV).map(PathBuf::from),
        };
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(&p).map_err(|e| {
                    CliError::Usage(format!("cannot read config {}: {e}", p.display()))
                })?;
                Self::parse(&text)
            }
            None => Ok(RunConfig::default()),
        }
    }

    pub fn dtype(&self) -> Result<DType, CliError> {
        DType::parse(&self.dtype)
            .ok_or_else(|| CliError::Usage(format!("dtype must be f32 or f64, got {}", self.dtype)))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.dtype()?;
        self.phantom.validate()?;
        self.arch.validate()?;
        self.train.validate()?;
        if self.eval.n_bootstrap == 0 || self.eval.batch_size == 0 {
            return Err(CliError::Usage(
                "eval.n_bootstrap and eval.batch_size must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        let mut resolved = self.clone();
        resolved.arch = resolved.arch.resolved();
        toml::to_string(&resolved).expect("config serialises")
    }

    /// Write the resolved config into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf, CliError> {
        std::fs::create_dir_all(dir).map_err(bloodnet::Error::from)?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        std::fs::write(&path, self.to_toml()).map_err(bloodnet::Error::from)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::parse("[train]\nepochs = 3\n").unwrap_err();
        assert!(err.to_string().contains("epochs"), "{err}");
        assert!(RunConfig::parse("colour = 1\n").is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.train.negatives_per_positive = f64::INFINITY;
        cfg.phantom.seed = 17;
        let back = RunConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(back.train, cfg.train);
        assert_eq!(back.phantom, cfg.phantom);
        assert_eq!(back.arch, cfg.arch.resolved());
        assert_eq!(RunConfig::parse(&back.to_toml()).unwrap(), back);
    }
}
