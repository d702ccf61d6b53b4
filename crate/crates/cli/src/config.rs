use std::path::{Path, PathBuf};

use medkan_core::arch::MedKanConfig;
use medkan_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::exit::{CliError, CliResult};

/// Everything a training run needs, as one strict JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: MedKanConfig,
    pub train: TrainConfig,
    /// `.npz` archive with train/val/test splits.
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    /// Independent runs with seeds `train.seed + r`.
    pub runs: usize,
    /// Worker threads; resolved from the flag, `MEDKAN_THREADS` or the
    /// hardware when absent.
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: MedKanConfig::default(),
            train: TrainConfig::default(),
            data: None,
            out: PathBuf::from("runs/medkan"),
            runs: 1,
            threads: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.runs == 0 {
            return Err(CliError::config("runs must be at least 1"));
        }
        if self.threads == Some(0) {
            return Err(CliError::config("threads must be at least 1"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
