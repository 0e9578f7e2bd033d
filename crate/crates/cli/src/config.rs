use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use seeker_core::modelio::HttpBackendConfig;
use seeker_core::pipeline::PipelineConfig;
use seeker_core::taskgen::TaskGenConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchSection {
    /// Remote search server.
    pub url: Option<String>,
    /// Local `index.bin`.
    pub index: Option<PathBuf>,
    /// One allowed domain per line.
    pub allowlist: Option<PathBuf>,
}

/// Everything a TOML config file may set; all sections are optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CliConfig {
    pub pipeline: PipelineConfig,
    pub backend: Option<HttpBackendConfig>,
    pub search: SearchSection,
    pub taskgen: TaskGenConfig,
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}
