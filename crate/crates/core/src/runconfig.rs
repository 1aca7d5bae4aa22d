//! Flat `key=value` overrides shared by every configurable struct.
//!
//! Configs expose themselves through [`KeyValue`]; a run applies overrides
//! from a file and from the command line in order and rejects any key that no
//! target claims.

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub trait KeyValue {
    /// Returns `Ok(false)` when the key is not recognised.
    fn apply_kv(&mut self, key: &str, value: &str) -> Result<bool>;
    fn to_kv(&self) -> Vec<(String, String)>;
}

impl KeyValue for crate::uranker::URankerConfig {
    fn apply_kv(&mut self, key: &str, value: &str) -> Result<bool> {
        crate::uranker::URankerConfig::apply_kv(self, key, value)
    }

    fn to_kv(&self) -> Vec<(String, String)> {
        crate::uranker::URankerConfig::to_kv(self)
    }
}

pub fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

pub fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

/// Splits `key=value`.
pub fn split_override(item: &str) -> Result<(String, String)> {
    let (k, v) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("expected key=value, got {item:?}")))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(Error::Config(format!("empty key in {item:?}")));
    }
    Ok((k.to_string(), v.trim().to_string()))
}

/// Reads a config file: either a flat JSON object or `key = value` lines
/// with `#` comments.
pub fn read_overrides(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.trim_start().starts_with('{') {
        let map: serde_json::Map<String, serde_json::Value> = serde_json::from_str(&text)?;
        return map
            .into_iter()
            .map(|(k, v)| {
                let v = match v {
                    serde_json::Value::String(s) => s,
                    serde_json::Value::Array(items) => items
                        .iter()
                        .map(|i| i.to_string())
                        .collect::<Vec<_>>()
                        .join(","),
                    other => other.to_string(),
                };
                Ok((k, v))
            })
            .collect();
    }
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(split_override)
        .collect()
}

/// Applies each override to the first target that recognises its key.
pub fn apply_overrides(
    overrides: &[(String, String)],
    targets: &mut [&mut dyn KeyValue],
) -> Result<()> {
    'outer: for (k, v) in overrides {
        for t in targets.iter_mut() {
            if t.apply_kv(k, v)? {
                continue 'outer;
            }
        }
        return Err(Error::Config(format!("unknown key {k:?}")));
    }
    Ok(())
}
