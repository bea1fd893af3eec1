use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

/// Record of one command invocation, written next to its artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub duration_secs: f64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Write through a temporary file in the target directory and rename it
/// into place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("writing into {}", dir.display()))?;
    tmp.write_all(bytes)
        .with_context(|| format!("writing {}", path.display()))?;
    tmp.persist(path)
        .map_err(|e| e.error)
        .with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

pub fn read_input(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

/// Collects a command's inputs and in-memory outputs; nothing touches the
/// disk until [`Run::finish`].
pub struct Run {
    command: &'static str,
    config: serde_json::Value,
    seed: u64,
    inputs: Vec<Artifact>,
    outputs: Vec<(PathBuf, Vec<u8>)>,
    start: Instant,
}

impl Run {
    pub fn new(command: &'static str, config: serde_json::Value, seed: u64) -> Self {
        Self {
            command,
            config,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            start: Instant::now(),
        }
    }

    /// Read an input file and record its checksum.
    pub fn input(&mut self, path: &Path) -> Result<String> {
        let text = read_input(path)?;
        self.inputs.push(Artifact {
            path: path.display().to_string(),
            sha256: sha256_hex(text.as_bytes()),
        });
        Ok(text)
    }

    /// A new run sharing this run's recorded inputs.
    pub fn fork(&self, config: serde_json::Value, seed: u64) -> Self {
        Self {
            command: self.command,
            config,
            seed,
            inputs: self.inputs.clone(),
            outputs: Vec::new(),
            start: Instant::now(),
        }
    }

    pub fn output(&mut self, path: PathBuf, bytes: impl Into<Vec<u8>>) {
        self.outputs.push((path, bytes.into()));
    }

    fn manifest(&self) -> RunManifest {
        RunManifest {
            command: self.command.to_string(),
            config: self.config.clone(),
            seed: self.seed,
            inputs: self.inputs.clone(),
            outputs: self
                .outputs
                .iter()
                .map(|(p, b)| Artifact {
                    path: p.display().to_string(),
                    sha256: sha256_hex(b),
                })
                .collect(),
            duration_secs: self.start.elapsed().as_secs_f64(),
        }
    }

    /// The manifest this run would write, without writing anything.
    pub fn preview(&self) -> RunManifest {
        self.manifest()
    }

    /// Write every output, then the manifest last.
    pub fn finish(self, manifest_path: &Path) -> Result<RunManifest> {
        for (path, bytes) in &self.outputs {
            write_atomic(path, bytes)?;
        }
        let manifest = self.manifest();
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        write_atomic(manifest_path, text.as_bytes())?;
        Ok(manifest)
    }
}

/// `<out>.manifest.json` beside a single-file output.
pub fn manifest_path_for(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}
