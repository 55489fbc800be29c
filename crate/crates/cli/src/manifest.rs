use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use crate::config::{Resolved, Source};

pub const MANIFEST_FILE: &str = "run_manifest.json";

/// What a run was asked to do, written before any work starts.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub seed: u64,
    /// Non-config arguments (paths, selections).
    pub args: BTreeMap<String, String>,
    pub artifacts: BTreeMap<String, String>,
    pub config: BTreeMap<String, Value>,
    pub provenance: BTreeMap<String, Source>,
}

impl RunManifest {
    pub fn new(subcommand: &str, resolved: &Resolved, seed: u64) -> Self {
        RunManifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            subcommand: subcommand.into(),
            seed,
            args: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            config: resolved.values.clone(),
            provenance: resolved.provenance.clone(),
        }
    }

    pub fn arg(mut self, name: &str, value: impl ToString) -> Self {
        self.args.insert(name.into(), value.to_string());
        self
    }

    pub fn artifact(mut self, name: &str, path: &Path) -> Self {
        self.artifacts.insert(name.into(), path.display().to_string());
        self
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Manifest location for an output directory.
pub fn in_dir(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_FILE)
}

/// Manifest location next to an output file: `<file>.run_manifest.json`.
pub fn beside(file: &Path) -> PathBuf {
    let mut name = file.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".");
    name.push(MANIFEST_FILE);
    file.with_file_name(name)
}
