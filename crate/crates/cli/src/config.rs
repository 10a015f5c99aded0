//! Effective run configuration: built-in (or checkpoint-echoed) defaults,
//! overlaid by a `key=value` file, overlaid by flags.

use std::collections::BTreeMap;
use std::path::Path;

use crate::Failure;

pub type Map = BTreeMap<String, String>;

/// Keys that may not be overridden; they select the architecture itself.
const FIXED: [&str; 2] = ["role", "arch"];

fn normalize(key: &str, base: &Map) -> String {
    let prefixed = format!("train.{key}");
    if !base.contains_key(key) && base.contains_key(&prefixed) {
        prefixed
    } else {
        key.to_string()
    }
}

fn put(map: &mut Map, key: &str, value: &str, origin: &str) -> Result<(), Failure> {
    let k = normalize(key.trim(), map);
    if FIXED.contains(&k.as_str()) {
        return Err(Failure::usage(format!(
            "{origin}: {k} cannot be overridden"
        )));
    }
    match map.get_mut(&k) {
        Some(slot) => {
            *slot = value.trim().to_string();
            Ok(())
        }
        None => Err(Failure::usage(format!("{origin}: unknown key {key:?}"))),
    }
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_lines(text: &str, origin: &str) -> Result<Vec<(String, String)>, Failure> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Failure::usage(format!("{origin}:{}: expected key=value", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn parse_pair(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected key=value, got {s:?}"))
}

/// Applies the config file, then the flag overrides, to `base`.
pub fn layer(
    mut base: Map,
    file: Option<&Path>,
    flags: &[(String, String)],
) -> Result<Map, Failure> {
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
        let origin = path.display().to_string();
        for (k, v) in parse_lines(&text, &origin)? {
            put(&mut base, &k, &v, &origin)?;
        }
    }
    for (k, v) in flags {
        put(&mut base, k, v, "flag")?;
    }
    Ok(base)
}
