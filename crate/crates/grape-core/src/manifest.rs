//! Experiment manifests: a JSON record per command run tying the effective
//! configuration and seed to the digests of every artifact it read or
//! wrote, so any reported number traces back to its inputs.

use crate::dataset::file_digest;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ArtifactRecord {
    /// What the artifact is: "dataset", "checkpoint", "embedding_table",
    /// "metrics_report", "figure", "loss_log", ...
    pub kind: String,
    pub path: PathBuf,
    /// SHA-256 of the file contents, lowercase hex.
    pub digest: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExperimentManifest {
    /// Subcommand that produced this manifest.
    pub command: String,
    /// Effective configuration after flag/file/preset merging.
    pub config: serde_json::Value,
    pub seed: u64,
    /// Unix timestamp (seconds) when the command finished.
    pub unix_time: u64,
    pub inputs: Vec<ArtifactRecord>,
    pub outputs: Vec<ArtifactRecord>,
}

impl ExperimentManifest {
    pub fn new(command: impl Into<String>, config: serde_json::Value, seed: u64) -> Self {
        let unix_time = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        ExperimentManifest {
            command: command.into(),
            config,
            seed,
            unix_time,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn record_input(&mut self, kind: impl Into<String>, path: &Path) -> Result<()> {
        self.inputs.push(artifact(kind.into(), path)?);
        Ok(())
    }

    pub fn record_output(&mut self, kind: impl Into<String>, path: &Path) -> Result<()> {
        self.outputs.push(artifact(kind.into(), path)?);
        Ok(())
    }

    /// Every referenced artifact must still exist with its recorded digest.
    pub fn verify(&self) -> Result<()> {
        for rec in self.inputs.iter().chain(&self.outputs) {
            let actual = file_digest(&rec.path)?;
            if actual != rec.digest {
                return Err(Error::Dataset(format!(
                    "{} digest mismatch: recorded {}, found {actual}",
                    rec.path.display(),
                    rec.digest
                )));
            }
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn artifact(kind: String, path: &Path) -> Result<ArtifactRecord> {
    Ok(ArtifactRecord {
        kind,
        path: path.to_path_buf(),
        digest: file_digest(path)?,
    })
}
