use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use seca_core::datastream::BANK_VERSION;
use seca_core::trainer::checkpoint;
use seca_core::trainer::RunConfig;

use crate::error::{CliError, CliResult};
use crate::io::write_text;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;
pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FormatVersions {
    pub manifest: u32,
    pub checkpoint: u32,
    pub feature_bank: u32,
    pub report: u32,
}

impl FormatVersions {
    pub fn current() -> Self {
        FormatVersions {
            manifest: MANIFEST_VERSION,
            checkpoint: checkpoint::VERSION,
            feature_bank: BANK_VERSION,
            report: REPORT_VERSION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub param: String,
    pub values: Vec<String>,
}

/// Everything needed to re-run the command that produced a directory.
/// Contains no timestamps or host details, so reruns are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub tool_version: String,
    pub format_versions: FormatVersions,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub trials: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sweep: Option<SweepSpec>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub variants: Vec<String>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub inputs: Vec<String>,
    /// Fully resolved config, defaults included.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub config: Option<RunConfig>,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        Manifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            format_versions: FormatVersions::current(),
            seed: None,
            trials: None,
            sweep: None,
            variants: Vec::new(),
            inputs: Vec::new(),
            config: None,
        }
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_text(&dir.join(MANIFEST_FILE), &(text + "\n"))
    }

    /// Reads a manifest, rejecting format versions this build does not write.
    /// Versions are checked before the rest is decoded so that an old or
    /// newer layout reports the mismatch rather than a parse error.
    pub fn read(dir: &Path) -> CliResult<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| CliError::malformed(format!("{}: {e}", path.display())))?;
        let versions: FormatVersions = value
            .get("format_versions")
            .cloned()
            .ok_or_else(|| CliError::malformed(format!("{}: no format_versions", path.display())))
            .and_then(|v| {
                serde_json::from_value(v)
                    .map_err(|e| CliError::malformed(format!("{}: format_versions: {e}", path.display())))
            })?;
        let current = FormatVersions::current();
        if versions != current {
            return Err(CliError::malformed(format!(
                "{}: format versions {versions:?} do not match this build's {current:?}",
                path.display()
            )));
        }
        serde_json::from_value(value).map_err(|e| CliError::malformed(format!("{}: {e}", path.display())))
    }
}
