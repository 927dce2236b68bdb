//! Layered run configuration: defaults, then a TOML file, then `key=value`
//! overrides.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use distortbench::generator::RunConfig;
use toml::{Table, Value};

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string (`filters=blur` and `filters=["blur"]` both work).
fn parse_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn coerce_list(key: &str, value: Value) -> Value {
    // A single filter or severity given without brackets.
    let listy = matches!(key, "filters" | "severities" | "distortion_levels" | "threshold_classes" | "threshold_probs");
    match value {
        Value::Array(_) => value,
        v if listy => Value::Array(vec![v]),
        v => v,
    }
}

pub fn apply_override(table: &mut Table, item: &str) -> Result<()> {
    let (key, raw) = item.split_once('=').ok_or_else(|| anyhow!("override `{item}` is not of the form key=value"))?;
    let key = key.trim();
    if key.is_empty() {
        bail!("override `{item}` has an empty key");
    }
    table.insert(key.to_string(), coerce_list(key, parse_value(raw.trim())));
    Ok(())
}

/// Deserializes `table`, naming the offending key when one is unknown or
/// has the wrong type.
pub fn config_from_table(table: Table) -> Result<RunConfig> {
    match Value::Table(table.clone()).try_into::<RunConfig>() {
        Ok(cfg) => {
            cfg.validate()?;
            Ok(cfg)
        }
        Err(whole) => {
            for (key, value) in &table {
                let mut single = Table::new();
                single.insert(key.clone(), value.clone());
                if let Err(e) = Value::Table(single).try_into::<RunConfig>() {
                    bail!("config key `{key}`: {e}");
                }
            }
            Err(anyhow!("config: {whole}"))
        }
    }
}

pub fn resolve_config(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut table = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            text.parse::<Table>().with_context(|| format!("parsing {}", path.display()))?
        }
        None => Table::new(),
    };
    for item in overrides {
        apply_override(&mut table, item)?;
    }
    config_from_table(table)
}

/// The resolved config as TOML, for the output directory.
pub fn render_config(config: &RunConfig) -> Result<String> {
    Ok(toml::to_string(config)?)
}
