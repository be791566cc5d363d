//! Run manifests: a deterministic text record of the command, resolved
//! configuration, and SHA-256 digests of every input and output file.
//! `report` re-verifies a manifest, so reruns can be checked for
//! bit-identical outputs.

use std::path::{Path, PathBuf};

use functa_core::codec::sha256_hex;
use functa_core::{FunctaError, Result};

use crate::config::Config;

pub struct Manifest {
    command: String,
    workers: usize,
    config: Vec<(String, String)>,
    inputs: Vec<(PathBuf, String)>,
    outputs: Vec<(PathBuf, String)>,
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(sha256_hex(&bytes))
}

impl Manifest {
    pub fn new(command: &str, workers: usize) -> Self {
        Manifest {
            command: command.to_string(),
            workers,
            config: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn record_config(&mut self, cfg: &Config) {
        self.config = cfg
            .resolved()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push((path.to_path_buf(), file_digest(path)?));
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push((path.to_path_buf(), file_digest(path)?));
        Ok(())
    }

    fn render(&self) -> String {
        let mut s = String::new();
        s.push_str("FUNCTA-MANIFEST 1\n");
        s.push_str(&format!("command={}\n", self.command));
        s.push_str(&format!("workers={}\n", self.workers));
        for (k, v) in &self.config {
            s.push_str(&format!("config.{k}={v}\n"));
        }
        for (p, d) in &self.inputs {
            s.push_str(&format!("input={d}:{}\n", p.display()));
        }
        for (p, d) in &self.outputs {
            s.push_str(&format!("output={d}:{}\n", p.display()));
        }
        s
    }

    /// Writes the manifest next to the primary output (`<output>.manifest`).
    pub fn write_for(&self, primary_output: &Path) -> Result<PathBuf> {
        let mut name = primary_output.as_os_str().to_os_string();
        name.push(".manifest");
        let path = PathBuf::from(name);
        std::fs::write(&path, self.render())?;
        Ok(path)
    }
}

/// Verifies every digest recorded in a manifest file. Returns a list of
/// human-readable status lines and an overall success flag.
pub fn verify(manifest_path: &Path) -> Result<(Vec<String>, bool)> {
    let text = std::fs::read_to_string(manifest_path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("FUNCTA-MANIFEST 1") => {}
        other => {
            return Err(FunctaError::Format(format!(
                "not a manifest: first line {other:?}"
            )))
        }
    }
    let mut report = Vec::new();
    let mut ok = true;
    for line in lines {
        let Some((key, value)) = line.split_once('=') else {
            continue;
        };
        if key != "input" && key != "output" {
            report.push(line.to_string());
            continue;
        }
        let (expected, path) = value.split_once(':').ok_or_else(|| {
            FunctaError::Format(format!("bad manifest entry '{line}'"))
        })?;
        let status = match file_digest(Path::new(path)) {
            Ok(actual) if actual == expected => "OK".to_string(),
            Ok(actual) => {
                ok = false;
                format!("MISMATCH (found {actual})")
            }
            Err(e) => {
                ok = false;
                format!("UNREADABLE ({e})")
            }
        };
        report.push(format!("{key} {path}: {status}"));
    }
    Ok((report, ok))
}
