//! The labeled dataset manifest: which knob settings have been labeled, where
//! their output recordings live, and which round/strategy produced them.
//! Serialized as `dataset.json` in the run directory; writing is
//! deterministic so identical runs produce byte-identical manifests.

use std::path::{Path, PathBuf};

use ampforge_core::amp::crc32;
use ampforge_core::audio::{read_wav, AudioError};
use ampforge_core::knob::{KnobError, KnobVector};
use ampforge_core::train::{TrainItem, TrainSet};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset parse error in {path}: {detail}")]
    Parse { path: String, detail: String },
    #[error("dataset invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Knob(#[from] KnobError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error("input checksum mismatch: manifest says {expected}, file hashes to {got}")]
    ChecksumMismatch { expected: String, got: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    InitialRandom,
    Active,
    RandomBaseline,
    BetaBaseline,
    Manual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub g: Vec<f64>,
    /// Output WAV path, relative to the run directory.
    pub output: String,
    pub round: u32,
    pub source: Source,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    /// Input WAV path relative to the run directory, plus its CRC-32.
    pub input_path: String,
    pub input_crc32: String,
    pub knob_labels: Vec<String>,
    pub entries: Vec<DatasetEntry>,
}

impl DatasetManifest {
    pub fn new(input_path: &str, input_bytes: &[u8], knob_labels: Vec<String>) -> Self {
        DatasetManifest {
            version: 1,
            input_path: input_path.to_string(),
            input_crc32: format!("{:08X}", crc32(input_bytes)),
            knob_labels,
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn k(&self) -> usize {
        self.knob_labels.len()
    }

    /// Highest round id present, or None for a dataset with no entries.
    pub fn last_round(&self) -> Option<u32> {
        self.entries.iter().map(|e| e.round).max()
    }

    pub fn entries_for_round(&self, round: u32) -> impl Iterator<Item = &DatasetEntry> {
        self.entries.iter().filter(move |e| e.round == round)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let mut prev_round = 0u32;
        for (i, e) in self.entries.iter().enumerate() {
            if e.g.len() != self.k() {
                return Err(DatasetError::Invariant(format!(
                    "entry {i} has {} knob values, expected {}",
                    e.g.len(),
                    self.k()
                )));
            }
            KnobVector::new(e.g.clone(), self.knob_labels.clone())?;
            if e.round < prev_round {
                return Err(DatasetError::Invariant(format!(
                    "round ids must be nondecreasing; entry {i} has round {} after {}",
                    e.round, prev_round
                )));
            }
            prev_round = e.round;
        }
        Ok(())
    }

    pub fn manifest_path(dir: &Path) -> PathBuf {
        dir.join("dataset.json")
    }

    pub fn load(dir: &Path) -> Result<Self, DatasetError> {
        let path = Self::manifest_path(dir);
        let name = path.display().to_string();
        let bytes = std::fs::read(&path).map_err(|source| DatasetError::Io { path: name.clone(), source })?;
        let m: DatasetManifest =
            serde_json::from_slice(&bytes).map_err(|e| DatasetError::Parse { path: name, detail: e.to_string() })?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<(), DatasetError> {
        self.validate()?;
        let path = Self::manifest_path(dir);
        let name = path.display().to_string();
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, json + "\n").map_err(|source| DatasetError::Io { path: name, source })
    }

    /// Load the referenced audio and build the in-memory training set.
    /// Verifies the input checksum first.
    pub fn materialize(&self, dir: &Path) -> Result<TrainSet, DatasetError> {
        let input_path = dir.join(&self.input_path);
        let bytes = std::fs::read(&input_path)
            .map_err(|source| DatasetError::Io { path: input_path.display().to_string(), source })?;
        let got = format!("{:08X}", crc32(&bytes));
        if got != self.input_crc32 {
            return Err(DatasetError::ChecksumMismatch { expected: self.input_crc32.clone(), got });
        }
        let input = read_wav(&input_path)?;
        let mut items = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let knobs = KnobVector::new(e.g.clone(), self.knob_labels.clone())?;
            let out = read_wav(&dir.join(&e.output))?;
            if out.len() != input.len() {
                return Err(DatasetError::Invariant(format!(
                    "output {} has {} samples, input has {}",
                    e.output,
                    out.len(),
                    input.len()
                )));
            }
            items.push(TrainItem { knobs, target: out.into_samples() });
        }
        Ok(TrainSet {
            sample_rate: input.sample_rate(),
            input: input.into_samples(),
            items,
        })
    }
}
