use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use contig_core::{Config, Dataset, Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct DatasetInfo {
    pub path: String,
    pub sha256: String,
    pub name: String,
    pub interactions: usize,
    pub nodes: usize,
    pub bipartite: bool,
}

impl DatasetInfo {
    pub fn describe(path: &Path, dataset: &Dataset) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(DatasetInfo {
            path: path.display().to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
            name: dataset.name().to_string(),
            interactions: dataset.len(),
            nodes: dataset.num_nodes(),
            bipartite: dataset.is_bipartite(),
        })
    }
}

/// Everything needed to rerun a command. Written when the command starts
/// and rewritten with timings and a final status when it ends.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub engine: &'static str,
    pub command: String,
    pub status: &'static str,
    pub config: BTreeMap<String, String>,
    pub config_fingerprint: String,
    pub seed: u64,
    pub deterministic: bool,
    pub ablation: Vec<&'static str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetInfo>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    pub outputs: BTreeMap<String, String>,
    /// Wall-clock seconds per phase.
    pub timings: BTreeMap<String, f64>,
    pub summary: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip)]
    path: PathBuf,
    #[serde(skip)]
    started: Option<Instant>,
}

impl RunManifest {
    pub fn new(path: PathBuf, command: &str, config: &Config) -> Self {
        RunManifest {
            engine: contig_core::VERSION,
            command: command.to_string(),
            status: "running",
            config: config.entries().into_iter().collect(),
            config_fingerprint: config.fingerprint(),
            seed: config.train.seed,
            deterministic: config.train.deterministic,
            ablation: config.model.ablation.active(),
            dataset: None,
            checkpoint: None,
            outputs: BTreeMap::new(),
            timings: BTreeMap::new(),
            summary: BTreeMap::new(),
            error: None,
            path,
            started: Some(Instant::now()),
        }
    }

    pub fn output(&mut self, role: &str, path: &Path) {
        self.outputs.insert(role.to_string(), path.display().to_string());
    }

    /// Runs `f` and records its wall time under `phase`.
    pub fn time<T>(&mut self, phase: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let out = f();
        self.timings.insert(phase.to_string(), t.elapsed().as_secs_f64());
        out
    }

    pub fn write(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&self.path, text + "\n").map_err(|e| Error::io(&self.path, e))
    }

    pub fn finish(&mut self, outcome: &Result<()>) -> Result<()> {
        if let Some(t) = self.started {
            self.timings.insert("total".into(), t.elapsed().as_secs_f64());
        }
        match outcome {
            Ok(()) => self.status = "complete",
            Err(e) => {
                self.status = "failed";
                self.error = Some(e.to_string());
            }
        }
        self.write()
    }
}

/// Reads the resolved config back out of a manifest's `config` table.
pub fn config_from_manifest(path: &Path) -> Result<Config> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let table = value
        .get("config")
        .and_then(|c| c.as_object())
        .ok_or_else(|| Error::Config(format!("{}: no config table", path.display())))?;
    let mut config = Config::default();
    for (key, raw) in table {
        let raw = raw
            .as_str()
            .ok_or_else(|| Error::Config(format!("{}: {key} is not a string", path.display())))?;
        config.set(key, raw)?;
    }
    Ok(config)
}
