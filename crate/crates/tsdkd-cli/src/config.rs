//! Config file loading: flat `key = value` lines plus `--set` overrides,
//! validated field by field. Unknown keys are rejected before any work
//! starts.

use std::path::Path;

use tsdkd::distill::TrainConfig;
use tsdkd::{Error, Result};

/// Parses an optional config file and applies overrides on top of the
/// defaults. An empty (or absent) file yields the default configuration.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = path {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io { path: path.into(), source: e })?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: expected `key = value`, got {line:?}",
                    path.display(),
                    lineno + 1
                ))
            })?;
            cfg.set_key(key.trim(), value.trim()).map_err(|e| {
                Error::Config(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
        }
    }
    for item in overrides {
        let (key, value) = item.split_once('=').ok_or_else(|| {
            Error::Config(format!("override {item:?}: expected key=value"))
        })?;
        cfg.set_key(key.trim(), value.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}
