//! Flat `key = value` configuration files.

use std::fs;
use std::path::Path;

use crate::error::{Result, ScdError};

/// Parses `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| ScdError::Param(format!("config line {}: expected key = value", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || k.contains(char::is_whitespace) {
            return Err(ScdError::Param(format!("config line {}: bad key '{k}'", n + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub fn load_config(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| ScdError::io(path, e))?;
    parse_config(&text)
}

/// `--key=value` flags; underscores in keys become hyphens.
pub fn to_flags(pairs: &[(String, String)]) -> Vec<String> {
    pairs.iter().map(|(k, v)| format!("--{}={v}", k.replace('_', "-"))).collect()
}
