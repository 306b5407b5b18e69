//! Small shared helpers for the command implementations.

use anyhow::{Context, Result};
use serde::Deserialize;
use std::path::Path;

#[derive(Deserialize)]
struct Record {
    id: String,
    text: String,
}

/// Load a JSON Lines corpus/queries file of `{"id": ..., "text": ...}`
/// records.
pub fn load_jsonl_records(path: &Path) -> Result<Vec<(String, String)>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(line)
            .with_context(|| format!("{}:{}: bad record", path.display(), lineno + 1))?;
        out.push((record.id, record.text));
    }
    Ok(out)
}

/// Echo a resolved configuration to standard error, one `key = value` line
/// each.
pub fn echo_config(command: &str, entries: &[(&str, String)]) {
    eprintln!("[{command}] resolved configuration:");
    for (key, value) in entries {
        eprintln!("  {key} = {value}");
    }
}
