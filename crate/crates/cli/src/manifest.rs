use std::path::{Path, PathBuf};
use std::time::Instant;

use disentangle::config::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Everything needed to rerun a command. Written when the command starts
/// and rewritten with its outcome when it ends.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub args: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<TrainConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset_seed: Option<u64>,
    /// SHA-256 of each file read or written, keyed by role.
    pub files: Vec<(String, String)>,
    pub output_dir: PathBuf,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub duration_secs: Option<f64>,
    #[serde(skip)]
    started: Option<Instant>,
}

pub fn file_hash(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

impl RunManifest {
    pub fn new(command: &str, output_dir: &Path) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            config: None,
            config_hash: None,
            dataset_seed: None,
            files: Vec::new(),
            output_dir: output_dir.to_path_buf(),
            status: "running".into(),
            error: None,
            duration_secs: None,
            started: Some(Instant::now()),
        }
    }

    pub fn with_config(mut self, config: &TrainConfig) -> Self {
        self.config_hash = Some(config.hash());
        self.config = Some(config.clone());
        self
    }

    pub fn file(&mut self, role: &str, path: &Path) -> std::io::Result<()> {
        self.files.push((role.to_string(), file_hash(path)?));
        Ok(())
    }

    fn path(&self) -> PathBuf {
        self.output_dir.join("manifest.json")
    }

    pub fn write(&self) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(self.path(), text + "\n")
    }

    pub fn finish(&mut self, outcome: Result<(), String>) -> std::io::Result<()> {
        self.duration_secs = self.started.map(|s| s.elapsed().as_secs_f64());
        match outcome {
            Ok(()) => self.status = "ok".into(),
            Err(e) => {
                self.status = "failed".into();
                self.error = Some(e);
            }
        }
        self.write()
    }
}
