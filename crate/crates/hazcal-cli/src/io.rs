//! On-disk formats specific to the CLI (see docs/formats.md).

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use hazcal_core::stepfn::StepFunction;

/// Competing-hazard file: a cumulative hazard plus optional pointwise
/// variances, both as step functions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompetingHazardFile {
    pub cumulative_hazard: StepFunction,
    #[serde(default)]
    pub variance: Option<StepFunction>,
}

/// Provenance block echoed into every output artifact: the subcommand, tool
/// version, and the effective configuration after flag/file merging.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub command: String,
    pub version: String,
    pub config: serde_json::Value,
}

impl RunReport {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config,
        }
    }

    /// Sidecar `<out>.run.json` for CSV artifacts.
    pub fn write_sidecar(&self, out: &Path) -> Result<()> {
        let mut sidecar = out.as_os_str().to_owned();
        sidecar.push(".run.json");
        let file = std::fs::File::create(std::path::PathBuf::from(sidecar))
            .context("creating run sidecar")?;
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {what} from {}", path.display()))?;
    let value = serde_json::from_str(&text).with_context(|| format!("parsing {what} from {}", path.display()))?;
    Ok(value)
}

pub fn write_json_pretty<T: Serialize>(path: &Path, value: &T, what: &str) -> Result<()> {
    let file = std::fs::File::create(path)
        .with_context(|| format!("creating {what} at {}", path.display()))?;
    serde_json::to_writer_pretty(file, value)?;
    Ok(())
}

/// Parse a comma-separated list of floats.
pub fn parse_f64_list(text: &str, what: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .with_context(|| format!("parsing {what}: {s:?} is not a number"))
        })
        .collect()
}
