//! Reproducibility record written alongside every output.

use std::path::{Path, PathBuf};

use serde::Serialize;

use partatlas_core::io::{save_json, DESCRIPTOR_VERSION, JSON_VERSION};
use partatlas_core::FileKind;

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Serialize)]
pub struct Versions {
    pub partatlas: &'static str,
    pub json_format: u32,
    pub descriptor_format: u32,
}

#[derive(Debug, Serialize)]
pub struct RunRecord<'a> {
    pub command: &'a str,
    pub args: Vec<String>,
    pub seed: u64,
    pub threads: usize,
    pub config_hash: String,
    pub config: &'a RunConfig,
    pub versions: Versions,
}

impl<'a> RunRecord<'a> {
    pub fn new(command: &'a str, seed: u64, config: &'a RunConfig) -> Self {
        Self {
            command,
            args: std::env::args().skip(1).collect(),
            seed,
            threads: rayon::current_num_threads(),
            config_hash: config.hash(),
            config,
            versions: Versions {
                partatlas: env!("CARGO_PKG_VERSION"),
                json_format: JSON_VERSION,
                descriptor_format: DESCRIPTOR_VERSION,
            },
        }
    }

    /// Writes `<out>.run.json` when there is an output file, and logs the
    /// hash either way.
    pub fn write(&self, out: Option<&Path>) -> Result<(), CliError> {
        log::info!(
            "{} seed {} config {}",
            self.command,
            self.seed,
            self.config_hash
        );
        if let Some(out) = out {
            save_json(&sidecar(out), FileKind::Run, self)?;
        }
        Ok(())
    }
}

pub fn sidecar(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".run.json");
    PathBuf::from(name)
}
