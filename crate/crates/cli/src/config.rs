//! TOML experiment configuration.

use std::path::{Path, PathBuf};

use rankup::{DataSource, DataSpec, Method, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Label split block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub n_labeled: usize,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub test_split_seed: u64,
    /// Pins the labeled subset across seeds; unset draws it from each run seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_split_seed: Option<u64>,
}

fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Output root; `--out` and `RANKUP_OUT` take precedence.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Write the final pseudo-label table of RDA runs.
    pub dump_rda_table: bool,
}

/// Grid for `sweep`: every method crossed with every label budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub methods: Vec<Method>,
    pub budgets: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DataSource,
    pub split: SplitConfig,
    #[serde(default)]
    pub method: TrainConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn data_spec(&self) -> DataSpec {
        DataSpec {
            source: self.dataset.clone(),
            n_labeled: self.split.n_labeled,
            test_fraction: self.split.test_fraction,
            test_split_seed: self.split.test_split_seed,
            label_split_seed: self.split.label_split_seed,
        }
    }

    /// Checks every nested block; errors name the offending field.
    pub fn validate(&self) -> Result<(), CliError> {
        let valid_name = !self.name.is_empty()
            && self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
            && !self.name.starts_with('.');
        if !valid_name {
            return Err(CliError::Config(
                "name: must be non-empty and use only [A-Za-z0-9._-]".into(),
            ));
        }
        self.method.validate().map_err(|e| field_error("method.", e))?;
        self.data_spec().validate().map_err(|e| match e {
            rankup::Error::Config { field, message } => {
                let field = field
                    .replace("data.source.", "dataset.")
                    .replace("data.", "split.");
                CliError::Config(format!("{field}: {message}"))
            }
            other => CliError::Config(other.to_string()),
        })?;
        if let Some(s) = &self.sweep {
            if s.methods.is_empty() {
                return Err(CliError::Config("sweep.methods: must not be empty".into()));
            }
            if s.budgets.is_empty() {
                return Err(CliError::Config("sweep.budgets: must not be empty".into()));
            }
            if let Some(b) = s.budgets.iter().find(|&&b| b < 2) {
                return Err(CliError::Config(format!("sweep.budgets: budget {b} is below 2")));
            }
        }
        Ok(())
    }
}

fn field_error(prefix: &str, e: rankup::Error) -> CliError {
    match e {
        rankup::Error::Config { field, message } => CliError::Config(format!("{prefix}{field}: {message}")),
        other => CliError::Config(other.to_string()),
    }
}
