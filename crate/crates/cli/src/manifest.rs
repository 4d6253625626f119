//! Run manifests and file helpers.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;

use netshrink::GraphModel;

use crate::error::{CliError, Result};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Written as `<command>.manifest.json` next to a command's outputs.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub tool_version: String,
    pub started_unix_s: f64,
    pub wall_time_s: f64,
}

/// Collects inputs and outputs while a command runs.
pub struct Run {
    command: &'static str,
    config: serde_json::Value,
    seed: u64,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    started: SystemTime,
    clock: Instant,
}

impl Run {
    pub fn start(command: &'static str, config: impl Serialize, seed: u64) -> Self {
        Self {
            command,
            config: serde_json::to_value(config).unwrap_or(serde_json::Value::Null),
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: SystemTime::now(),
            clock: Instant::now(),
        }
    }

    pub fn set_config(&mut self, config: impl Serialize) {
        self.config = serde_json::to_value(config).unwrap_or(serde_json::Value::Null);
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn load_model(&mut self, path: &Path) -> Result<GraphModel> {
        self.input(path);
        netshrink::onnx::load_model(path).map_err(|source| CliError::Input {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn read_text(&mut self, path: &Path) -> Result<String> {
        self.input(path);
        fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn write(&mut self, dir: &Path, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|source| CliError::Io { path: path.clone(), source })?;
        self.outputs.push(path.clone());
        Ok(path)
    }

    pub fn write_json(&mut self, dir: &Path, name: &str, value: &impl Serialize) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value).expect("report serializes");
        text.push('\n');
        self.write(dir, name, text)
    }

    pub fn write_model(&mut self, dir: &Path, name: &str, model: &GraphModel) -> Result<PathBuf> {
        let bytes = netshrink::onnx::encode_model(model)?;
        self.write(dir, name, bytes)
    }

    /// Write the manifest into `dir`.
    pub fn finish(self, dir: &Path) -> Result<PathBuf> {
        let manifest = RunManifest {
            command: self.command.to_string(),
            config: self.config,
            seed: self.seed,
            inputs: self.inputs,
            outputs: self.outputs,
            tool_version: TOOL_VERSION.to_string(),
            started_unix_s: self.started.duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64()),
            wall_time_s: self.clock.elapsed().as_secs_f64(),
        };
        let path = dir.join(format!("{}.manifest.json", self.command));
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|source| CliError::Io { path: path.clone(), source })?;
        Ok(path)
    }
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.to_path_buf(),
        source,
    })
}
