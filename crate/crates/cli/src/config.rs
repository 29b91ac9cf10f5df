//! Run configuration: library defaults, overridden by an optional JSON
//! file, overridden by command-line flags.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use partatlas_core::{
    AnchorHyper, AtlasParams, DetectionParams, MatchSettings, MilConfig, SyntheticProfile,
};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub anchors: AnchorHyper,
    pub detection: DetectionParams,
    pub mil: MilConfig,
    pub matching: MatchSettings,
    pub atlas: AtlasParams,
    /// Base profile for `synth`; the `--profile` preset when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth: Option<SyntheticProfile>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    /// Applies the global seed to every seeded component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.anchors.seed = seed;
        self.mil.seed = seed;
        if let Some(p) = self.synth.as_mut() {
            p.seed = seed;
        }
        self
    }

    /// SHA-256 of the effective configuration, as lowercase hex.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(text.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
