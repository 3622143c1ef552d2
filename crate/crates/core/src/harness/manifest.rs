use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, SeedSource};
use super::output::CSV_SCHEMA_VERSION;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Platform {
    pub os: String,
    pub arch: String,
    pub family: String,
    pub endian: String,
    pub pointer_width: usize,
    pub cpus: usize,
}

impl Platform {
    pub fn current() -> Self {
        Self {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            family: std::env::consts::FAMILY.into(),
            endian: if cfg!(target_endian = "little") { "little" } else { "big" }.into(),
            pointer_width: usize::BITS as usize,
            cpus: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSeed {
    pub sample_id: usize,
    /// Seed of the stream shared by every cell for this sample.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    /// Relative to the output directory.
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub label: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact_version: String,
    pub csv_schema: u32,
    pub command: String,
    pub seed_source: SeedSource,
    pub config: ExperimentConfig,
    /// Hash of the checkpoint used, or of the freshly trained weights.
    pub model_sha256: String,
    pub platform: Platform,
    /// Semantics of the reconstruction metrics.
    pub metric_notes: Vec<String>,
    pub samples: Vec<SampleSeed>,
    pub timings: Vec<TimingRecord>,
    pub files: Vec<FileRecord>,
}

impl RunManifest {
    pub fn new(command: &str, config: &ExperimentConfig, model_sha256: String) -> Self {
        Self {
            artifact_version: env!("CARGO_PKG_VERSION").into(),
            csv_schema: CSV_SCHEMA_VERSION,
            command: command.into(),
            seed_source: config.seed_source,
            config: config.clone(),
            model_sha256,
            platform: Platform::current(),
            metric_notes: vec![
                "precision and recall are bag-of-tokens with multiplicity, in percent".into(),
                "rouge_l is the LCS F1 score with beta = 1".into(),
            ],
            samples: Vec::new(),
            timings: Vec::new(),
            files: Vec::new(),
        }
    }

    pub fn time(&mut self, label: impl Into<String>, seconds: f64) {
        self.timings.push(TimingRecord {
            label: label.into(),
            seconds,
        });
    }

    /// Hashes `dir/rel` and records it.
    pub fn add_file(&mut self, dir: &Path, rel: impl Into<PathBuf>) -> Result<()> {
        let rel = rel.into();
        let bytes = std::fs::read(dir.join(&rel))?;
        self.files.retain(|f| f.path != rel);
        self.files.push(FileRecord {
            path: rel,
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Files whose current hash differs from the recorded one.
    pub fn verify_files(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut bad = Vec::new();
        for f in &self.files {
            match std::fs::read(dir.join(&f.path)) {
                Ok(b) if sha256_hex(&b) == f.sha256 => {}
                Ok(_) => bad.push(f.path.clone()),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => bad.push(f.path.clone()),
                Err(e) => return Err(Error::Io(e)),
            }
        }
        Ok(bad)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
