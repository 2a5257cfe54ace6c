//! Versioned on-disk form of an emulation run.

use std::path::Path;

use dtr_core::causal::Estimator;
use dtr_core::emucontrol::EmulationState;
use serde::{Deserialize, Serialize};

use crate::config::Setup;
use crate::error::{CliError, CliResult};

pub const STATE_FORMAT: &str = "dtr-emulation-state";
pub const STATE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateFile {
    pub format: String,
    pub version: u32,
    pub setup: Setup,
    pub estimator: Estimator,
    /// Design points as given, before any sequential sampling.
    pub design: Vec<Vec<f64>>,
    pub emulation: EmulationState,
}

impl StateFile {
    pub fn new(setup: Setup, estimator: Estimator, emulation: EmulationState) -> Self {
        Self {
            format: STATE_FORMAT.into(),
            version: STATE_VERSION,
            setup,
            estimator,
            design: emulation.points[..emulation.n_design].to_vec(),
            emulation,
        }
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        let text = serde_json::to_string_pretty(self).expect("state serializes");
        std::fs::write(path, text)
            .map_err(|e| CliError::Config(format!("cannot write state {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read state {}: {e}", path.display())))?;
        let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| {
            CliError::Config(format!("state {} is not valid JSON: {e}", path.display()))
        })?;
        if raw.get("format").and_then(|f| f.as_str()) != Some(STATE_FORMAT) {
            return Err(CliError::Config(format!(
                "{} is not an emulation state file",
                path.display()
            )));
        }
        let version = raw.get("version").and_then(|v| v.as_u64());
        if version != Some(STATE_VERSION as u64) {
            return Err(CliError::Config(format!(
                "state {} has version {version:?}; this build reads version {STATE_VERSION}",
                path.display()
            )));
        }
        serde_json::from_value(raw)
            .map_err(|e| CliError::Config(format!("state {} is corrupt: {e}", path.display())))
    }
}
