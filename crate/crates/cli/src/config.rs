//! Config-file overlay and run manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::ArgMatches;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::Failure;

/// Applies config-file values to every field not given on the command line.
///
/// The file is either a bare object of flag values or a manifest written by
/// an earlier run, in which case its `config` member is used.
pub fn overlay<T: Serialize + DeserializeOwned>(
    args: T,
    matches: &ArgMatches,
    file: Option<&Path>,
) -> Result<T, Failure> {
    let Some(path) = file else {
        return Ok(args);
    };
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    let parsed: Value = serde_json::from_str(&text)
        .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    let source = match parsed.get("config") {
        Some(Value::Object(_)) if parsed.get("subcommand").is_some() => parsed["config"].clone(),
        _ => parsed,
    };
    let Value::Object(overrides) = source else {
        return Err(Failure::Config(format!(
            "{}: config must be a JSON object",
            path.display()
        )));
    };
    let mut current = serde_json::to_value(&args).expect("args serialize");
    let fields = current.as_object_mut().expect("args are a struct");
    for (key, value) in overrides {
        if !fields.contains_key(&key) {
            return Err(Failure::Config(format!(
                "{}: unknown config key '{key}'",
                path.display()
            )));
        }
        if key == "config" {
            continue;
        }
        if matches.value_source(&key) != Some(ValueSource::CommandLine) {
            fields.insert(key, value);
        }
    }
    serde_json::from_value(current)
        .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub config: Value,
    pub seeds: Vec<u64>,
    pub workers: usize,
    pub exit_code: i32,
    /// Output path (relative to the run directory) to SHA-256.
    pub artifacts: BTreeMap<String, String>,
}

/// Tracks files written by a run so the manifest can hash them.
pub struct RunDir {
    pub root: PathBuf,
    written: Vec<PathBuf>,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self, Failure> {
        fs::create_dir_all(root)
            .map_err(|e| Failure::Config(format!("cannot create {}: {e}", root.display())))?;
        Ok(Self {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    /// Path under the run directory, creating parents.
    pub fn path(&self, rel: &str) -> Result<PathBuf, Failure> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)
                .map_err(|e| Failure::Config(format!("cannot create {}: {e}", parent.display())))?;
        }
        Ok(p)
    }

    pub fn record(&mut self, path: PathBuf) {
        self.written.push(path);
    }

    pub fn write_manifest(
        &self,
        subcommand: &str,
        config: &impl Serialize,
        seeds: Vec<u64>,
        exit_code: i32,
    ) -> Result<(), Failure> {
        let mut artifacts = BTreeMap::new();
        for p in &self.written {
            let rel = p.strip_prefix(&self.root).unwrap_or(p).display().to_string();
            artifacts.insert(rel, abstention::data_io::file_sha256(p)?);
        }
        let manifest = Manifest {
            tool: "abstain".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            subcommand: subcommand.into(),
            config: serde_json::to_value(config).expect("config serializes"),
            seeds,
            workers: rayon::current_num_threads(),
            exit_code,
            artifacts,
        };
        let path = self.root.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, text + "\n")
            .map_err(|e| Failure::Config(format!("cannot write {}: {e}", path.display())))
    }
}
