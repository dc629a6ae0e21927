//! Config resolution: preset, then the user file, then `--set` overrides.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use mdps_core::experiment::ExperimentConfig;
use serde_json::{Map, Value};

/// Recursively merges `over` into `base`. Objects merge key by key; any other
/// value replaces. A tagged object (one with `"kind"`) replaces wholesale
/// when the tag changes, so fields of the old variant do not leak through.
pub fn deep_merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            let retag = matches!((b.get("kind"), o.get("kind")), (Some(x), Some(y)) if x != y);
            if retag {
                *b = o;
                return;
            }
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Applies one `dotted.path=value` override. The value is read as JSON when
/// it parses and as a plain string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("override {assignment:?} is not of the form key=value"))?;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        bail!("override path {path:?} has an empty component");
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for key in &keys[..keys.len() - 1] {
        if node.is_null() {
            *node = Value::Object(Map::new());
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| anyhow!("override path {path:?}: {key:?} is not inside an object"))?;
        node = obj.entry(key.to_string()).or_insert(Value::Null);
    }
    if node.is_null() {
        *node = Value::Object(Map::new());
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| anyhow!("override path {path:?} does not lead to an object"))?;
    let last = keys[keys.len() - 1].to_string();
    match obj.get_mut(&last) {
        Some(slot) => deep_merge(slot, value),
        None => {
            obj.insert(last, value);
        }
    }
    Ok(())
}

pub fn resolve(
    preset: &str,
    config: Option<&Path>,
    overrides: &[String],
    out: Option<&Path>,
) -> Result<ExperimentConfig> {
    let mut value = serde_json::to_value(ExperimentConfig::preset(preset)?)?;
    if let Some(path) = config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let user: Value =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if !user.is_object() {
            bail!("config {} must hold a JSON object", path.display());
        }
        deep_merge(&mut value, user);
    }
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    let mut cfg: ExperimentConfig = serde_json::from_value(value).context("invalid configuration")?;
    if let Some(dir) = out {
        cfg.output_dir = dir.to_path_buf();
    }
    cfg.validate()?;
    Ok(cfg)
}
