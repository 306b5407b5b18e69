//! Optional per-subcommand config file: UTF-8 `key = value` lines, `#`
//! comments. Keys are the subcommand's long flag names; command-line flags
//! override file values (the file's settings are injected before the user's
//! arguments, and later occurrences win).

use anyhow::{bail, Context, Result};
use std::collections::HashSet;

/// Parse `key = value` lines, skipping blanks and `#` comments.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!(
                "config line {}: expected `key = value`, got {:?}",
                lineno + 1,
                raw
            );
        };
        out.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

/// Rewrite argv so config-file settings precede the user's flags for one
/// subcommand. `known_flags` are the subcommand's long option names;
/// `bool_flags` take no value on the command line.
pub fn inject_config_args(
    argv: &[String],
    known_flags: &HashSet<String>,
    bool_flags: &HashSet<String>,
) -> Result<Vec<String>> {
    // argv = [bin, subcommand, rest...]
    if argv.len() < 2 {
        return Ok(argv.to_vec());
    }
    let rest = &argv[2..];
    let mut config_path: Option<String> = None;
    let mut iter = rest.iter();
    while let Some(arg) = iter.next() {
        if arg == "--config" {
            config_path = iter.next().cloned();
        } else if let Some(path) = arg.strip_prefix("--config=") {
            config_path = Some(path.to_string());
        }
    }
    let Some(path) = config_path else {
        return Ok(argv.to_vec());
    };

    let text = std::fs::read_to_string(&path).with_context(|| format!("reading config {path}"))?;
    let entries = parse_config(&text)?;

    let mut injected: Vec<String> = Vec::new();
    for (key, value) in entries {
        if !known_flags.contains(&key) {
            bail!(
                "config {path}: unknown key {key:?} for subcommand {:?}",
                argv[1]
            );
        }
        if bool_flags.contains(&key) {
            match value.as_str() {
                "true" | "1" | "yes" | "on" => injected.push(format!("--{key}")),
                "false" | "0" | "no" | "off" => {}
                other => bail!("config {path}: flag {key:?} expects a boolean, got {other:?}"),
            }
        } else {
            injected.push(format!("--{key}"));
            injected.push(value);
        }
    }

    let mut out = Vec::with_capacity(argv.len() + injected.len());
    out.push(argv[0].clone());
    out.push(argv[1].clone());
    out.extend(injected);
    out.extend(rest.iter().cloned());
    Ok(out)
}
