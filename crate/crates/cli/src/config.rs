//! TOML experiment files with dotted-path overrides.

use std::path::Path;

use aemlab::trainer::ExperimentConfig;
use toml::{Table, Value};

use crate::error::{CliError, CliResult};

/// Reads `path` (or starts from defaults), applies `key.path=value`
/// overrides in order and validates the result.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> CliResult<ExperimentConfig> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            text.parse::<Table>()
                .map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?
        }
        None => Table::new(),
    };
    for item in overrides {
        apply_override(&mut table, item)?;
    }
    let config = from_table(table)?;
    config
        .validate()
        .map_err(|e| CliError::Validation(e.to_string()))?;
    Ok(config)
}

fn from_table(table: Table) -> CliResult<ExperimentConfig> {
    // Re-parsing the rendered text keeps key names in the error message.
    let text = toml::to_string(&table).map_err(|e| CliError::Validation(e.to_string()))?;
    toml::from_str(&text).map_err(|e| CliError::Validation(e.to_string()))
}

/// Sets one `a.b.c=value` override. The value is read as a TOML literal and
/// falls back to a bare string.
pub fn apply_override(table: &mut Table, item: &str) -> CliResult<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| CliError::Validation(format!("override {item:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').map(str::trim).collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Validation(format!("override key {key:?} has an empty segment")));
    }
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut cursor = table;
    for (depth, part) in parents.iter().enumerate() {
        let slot = cursor
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cursor = match slot {
            Value::Table(t) => t,
            _ => {
                return Err(CliError::Validation(format!(
                    "{} is not a table",
                    parts[..=depth].join(".")
                )))
            }
        };
    }
    cursor.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

pub fn render_config(config: &ExperimentConfig) -> CliResult<String> {
    toml::to_string(config).map_err(|e| CliError::Validation(e.to_string()))
}

pub fn parse_config(text: &str) -> CliResult<ExperimentConfig> {
    toml::from_str(text).map_err(|e| CliError::Validation(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_nest_and_type() {
        let mut t = Table::new();
        apply_override(&mut t, "train.lr=2.5").unwrap();
        apply_override(&mut t, "train.aem_mode=reverse").unwrap();
        apply_override(&mut t, "env.kind=\"grid-fetch\"").unwrap();
        let cfg = from_table(t).unwrap();
        assert_eq!(cfg.train.lr, 2.5);
        assert_eq!(cfg.train.aem_mode, aemlab::aem::AemMode::Reverse);
        assert_eq!(cfg.env.kind, aemlab::env::EnvKind::GridFetch);
    }

    #[test]
    fn bad_overrides_are_rejected() {
        let mut t = Table::new();
        assert!(apply_override(&mut t, "train.lr").is_err());
        assert!(apply_override(&mut t, "train..lr=1").is_err());
        apply_override(&mut t, "train.lr=1").unwrap();
        assert!(apply_override(&mut t, "train.lr.x=1").is_err());
        apply_override(&mut t, "train.lrr=1").unwrap();
        let err = from_table(t).unwrap_err().to_string();
        assert!(err.contains("lrr"), "{err}");
    }

    #[test]
    fn round_trip_is_identity() {
        let mut cfg = ExperimentConfig::default();
        cfg.train.epsilon = 1e-8;
        cfg.train.lr = 0.1 + 0.2;
        cfg.env.reward.invalid_penalty = -0.1;
        assert_eq!(parse_config(&render_config(&cfg).unwrap()).unwrap(), cfg);
    }
}
