//! Dotted-path access to the JSON form of [`RunConfig`].
//!
//! Every leaf of the default config becomes a flag of the same dotted name,
//! e.g. `--lagkv.retention_ratio 1.0` or `--bench.lengths [48,80]`.

use anyhow::{anyhow, bail, Context, Result};
use lrsa_core::RunConfig;
use serde_json::Value;

/// Leaf paths of the default config, in document order.
pub fn dotted_keys() -> Vec<String> {
    let value = serde_json::to_value(RunConfig::default()).expect("config serializes");
    let mut out = Vec::new();
    collect(&value, String::new(), &mut out);
    out
}

fn collect(v: &Value, prefix: String, out: &mut Vec<String>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                collect(child, path, out);
            }
        }
        _ => out.push(prefix),
    }
}

/// Parses a flag value as JSON, falling back to a bare string.
pub fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map = cur
            .as_object_mut()
            .ok_or_else(|| anyhow!("{} is not a section", parts[..i].join(".")))?;
        if i + 1 == parts.len() {
            if !map.contains_key(*part) {
                bail!("unknown config key {path}");
            }
            map.insert(part.to_string(), value);
            return Ok(());
        }
        cur = map.get_mut(*part).ok_or_else(|| anyhow!("unknown config key {path}"))?;
    }
    bail!("empty config key")
}

/// Loads `base` (or the defaults), applies the overrides in order and
/// validates the result, reporting every problem at once.
pub fn resolve(base: Option<&str>, overrides: &[(String, Value)]) -> Result<RunConfig> {
    let cfg: RunConfig = match base {
        Some(text) => serde_json::from_str(text).context("parsing config file")?,
        None => RunConfig::default(),
    };
    let mut value = serde_json::to_value(&cfg)?;
    for (path, v) in overrides {
        set_path(&mut value, path, v.clone())?;
    }
    let cfg: RunConfig = serde_json::from_value(value).context("applying overrides")?;
    cfg.validate()?;
    Ok(cfg)
}
