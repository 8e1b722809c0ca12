use std::fs;
use std::path::{Path, PathBuf};

use seca_core::trainer::RunConfig;

use crate::error::{CliError, CliResult};

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Loads a config file, or the defaults when no path is given.
/// Relative feature-bank paths resolve against the config's directory.
pub fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    let Some(path) = path else {
        let cfg = RunConfig::default();
        cfg.validate()?;
        return Ok(cfg);
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut cfg = RunConfig::from_json(&text).map_err(|e| CliError::from(e).context(path.display()))?;
    if let seca_core::trainer::DataSource::FeatureBank { path: bank, .. } = &mut cfg.data {
        if bank.is_relative() {
            let base = path.parent().map(Path::to_path_buf).unwrap_or_else(PathBuf::new);
            *bank = base.join(&*bank);
        }
    }
    Ok(cfg)
}

/// Number of worker threads; `SECA_THREADS` caps it.
pub fn worker_threads() -> CliResult<Option<usize>> {
    match std::env::var("SECA_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(CliError::config(format!("SECA_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(None),
    }
}
