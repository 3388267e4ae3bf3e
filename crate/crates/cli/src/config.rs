//! Pipeline configuration from a TOML file plus `--set key=value` overrides.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use i2p_core::pipeline::PipelineConfig;
use serde::Deserialize;
use toml::{Table, Value};

/// Parses an override value as a TOML scalar or array; bare words fall back
/// to strings so `--set scene_name=foo` works without quoting.
fn parse_value(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("override {spec:?} is not key=value"))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        bail!("override key {key:?} is malformed");
    }
    let mut node = table;
    for part in &path[..path.len() - 1] {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| anyhow!("override {key:?}: {part:?} is not a table"))?;
    }
    node.insert(path[path.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Nested tables present in the file are merged with the defaults of the
/// enclosing struct, so partial sections are fine.
fn fill_defaults(table: &mut Table) -> Result<()> {
    let defaults = Table::try_from(PipelineConfig::default()).context("serialising defaults")?;
    merge(table, &defaults);
    Ok(())
}

fn merge(target: &mut Table, defaults: &Table) {
    for (k, dv) in defaults {
        match (target.get_mut(k), dv) {
            (Some(Value::Table(t)), Value::Table(d)) => merge(t, d),
            (Some(_), _) => {}
            (None, _) => {
                target.insert(k.clone(), dv.clone());
            }
        }
    }
}

pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<PipelineConfig> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            text.parse::<Table>().with_context(|| format!("parsing {}", p.display()))?
        }
        None => Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    fill_defaults(&mut table)?;
    let cfg = PipelineConfig::deserialize(Value::Table(table)).context("invalid configuration")?;
    cfg.validate().context("invalid configuration")?;
    Ok(cfg)
}
