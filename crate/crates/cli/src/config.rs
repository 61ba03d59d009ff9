//! Pipeline configuration file (TOML). CLI flags override file values.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use medqa_core::qa::GeneratorConfig;
use medqa_core::EsraParams;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub schema: Option<PathBuf>,
    pub facts: Option<PathBuf>,
    pub endpoint: Option<PathBuf>,
    pub templates: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub esra: EsraParams,
    pub generator: GeneratorConfig,
    pub paths: Paths,
    pub output_dir: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: PipelineConfig = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    /// Range checks plus existence of every referenced input path.
    pub fn validate(&self) -> Result<()> {
        self.esra.validate()?;
        self.generator.validate()?;
        let p = &self.paths;
        for (name, path) in [("schema", &p.schema), ("facts", &p.facts), ("endpoint", &p.endpoint), ("templates", &p.templates)] {
            if let Some(path) = path {
                if !path.exists() {
                    bail!("paths.{name}: {} does not exist", path.display());
                }
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).context("seeds above 2^63 - 1 cannot be written as TOML integers")
    }
}
