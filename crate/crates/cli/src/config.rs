//! Run configuration files and `--set key=value` overrides.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use ctxmt::experiment::RunConfig;
use toml::{Table, Value};

/// Keys whose default is absent and therefore missing from the serialized
/// defaults.
const OPTIONAL_KEYS: &[&str] = &["train.max_duration", "train.adam.clip_norm", "distill.teacher_checkpoint"];

fn known_keys() -> Result<Table> {
    Ok(Table::try_from(RunConfig::default())?)
}

fn check_keys(table: &Table, reference: &Table, prefix: &str) -> Result<()> {
    for (key, value) in table {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match (reference.get(key), value) {
            (Some(Value::Table(r)), Value::Table(t)) => check_keys(t, r, &path)?,
            (Some(Value::Table(_)), _) => bail!("config key `{path}` is a section, not a value"),
            (Some(_), _) => {}
            (None, _) if OPTIONAL_KEYS.contains(&path.as_str()) => {}
            (None, _) => bail!("unknown config key `{path}`"),
        }
    }
    Ok(())
}

/// Parses an override value as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Applies one `dotted.key=value` override.
pub fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .with_context(|| format!("override `{spec}` is not of the form key=value"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("malformed config key `{key}`");
    }
    let mut node = table;
    for p in &parts[..parts.len() - 1] {
        let entry = node.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        node = match entry {
            Value::Table(t) => t,
            _ => bail!("config key `{key}`: `{p}` is a value, not a section"),
        };
    }
    node.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Merges defaults, an optional config file and overrides, in that order.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut table = match path {
        Some(p) => fs::read_to_string(p)
            .with_context(|| format!("reading config {}", p.display()))?
            .parse::<Table>()
            .with_context(|| format!("parsing config {}", p.display()))?,
        None => Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let reference = known_keys()?;
    check_keys(&table, &reference, "")?;
    let mut merged = reference;
    merge(&mut merged, table);
    let cfg: RunConfig = Value::Table(merged).try_into().context("invalid config value")?;
    cfg.validate()?;
    Ok(cfg)
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Canonical text form written as `config.snapshot`.
pub fn snapshot(cfg: &RunConfig) -> Result<String> {
    Ok(toml::to_string(cfg)?)
}
