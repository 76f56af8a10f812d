use std::path::{Path, PathBuf};

use fedplt::io::write_atomically;
use serde::Serialize;
use serde_json::Value;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Everything needed to reproduce one invocation.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub version: String,
    pub seed: Option<u64>,
    /// Parsed flags with every default filled in.
    pub params: Value,
    /// Values derived from the flags and inputs (steps, probabilities, bounds).
    pub resolved: Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(subcommand: &str, params: &impl Serialize) -> anyhow::Result<Self> {
        Ok(Self {
            subcommand: subcommand.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: None,
            params: serde_json::to_value(params)?,
            resolved: Value::Null,
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        write_atomically(&dir.join(MANIFEST_FILE), text.as_bytes())?;
        Ok(())
    }
}

/// Writes `contents` to `dir/name` and records the path in the manifest.
pub fn emit(m: &mut RunManifest, dir: &Path, name: &str, contents: &[u8]) -> anyhow::Result<()> {
    let path = dir.join(name);
    write_atomically(&path, contents)?;
    m.outputs.push(path);
    Ok(())
}
