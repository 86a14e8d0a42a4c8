//! Experiment configuration: one JSON file fully determines a run.

use std::path::Path;

use ampforge_core::acquire::{AcquireConfig, DisagreementWeights};
use ampforge_core::amp::SynthAmpConfig;
use ampforge_core::knob::default_labels;
use ampforge_core::mel::{multiscale_configs, MelConfig};
use ampforge_core::models::{LstmSpec, ModelSpec, WaveNetSpec};
use ampforge_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error in {path}: {detail}")]
    Parse { path: String, detail: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OracleKind {
    /// Self-contained labeling with the built-in synthetic amp.
    Synthetic { amp: SynthAmpConfig },
    /// Labels arrive by file exchange: export requests, record, ingest.
    Manual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    Lstm,
    WaveNet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub version: u32,
    /// Root seed; all other randomness is derived from it.
    pub seed: u64,
    pub sample_rate: u32,
    pub knob_labels: Vec<String>,
    /// Active-learning rounds (T). Round 0 is the initial random dataset.
    pub rounds: u32,
    pub ensemble_size: usize,
    pub ensemble_arch: ArchKind,
    pub final_arch: ArchKind,
    pub lstm_spec: LstmSpec,
    pub wavenet_spec: WaveNetSpec,
    /// Per-role training settings; the `seed` fields inside are overwritten
    /// from the root seed at each use.
    pub ensemble_train: TrainConfig,
    pub final_train: TrainConfig,
    pub acquire: AcquireConfig,
    pub disagreement: DisagreementWeights,
    /// Mel resolution used inside the disagreement objective.
    pub acquire_mel: MelConfig,
    pub oracle: OracleKind,
    pub initial_points: usize,
    /// Per-round caps on accepted proposals (cycled when shorter than T).
    /// When set, rounds are topped up to exactly the cap.
    pub round_caps: Option<Vec<usize>>,
    /// Rounds after which the final model is retrained and archived.
    pub checkpoint_rounds: Vec<u32>,
    pub input_seconds: f64,
    pub test_clips: usize,
    pub test_clip_seconds: f64,
    pub test_settings: usize,
}

impl ExperimentConfig {
    /// Desk-scale defaults: 6 knobs, LSTM ensemble of 4, WaveNet final model,
    /// 10-second composite input at 16 kHz, synthetic oracle.
    pub fn desk_default(seed: u64) -> Self {
        let sr = 16_000u32;
        let knobs = 6usize;
        let mel_scales = multiscale_configs(sr);
        let acquire_mel = MelConfig {
            n_fft: 512,
            hop: 128,
            n_mels: 40,
            f_min: 0.0,
            f_max: sr as f64 / 2.0,
            log_floor: 1e-5,
        };
        let excerpt_len = 16_384usize;
        let frames = acquire_mel.frames(excerpt_len).expect("excerpt covers one window");
        ExperimentConfig {
            version: 1,
            seed,
            sample_rate: sr,
            knob_labels: default_labels(knobs),
            rounds: 10,
            ensemble_size: 4,
            ensemble_arch: ArchKind::Lstm,
            final_arch: ArchKind::WaveNet,
            lstm_spec: LstmSpec { hidden_size: 32, num_layers: 1, knobs },
            wavenet_spec: WaveNetSpec {
                channels: 8,
                kernel_size: 3,
                dilations: vec![1, 2, 4, 8, 16, 32, 64, 128, 256],
                skip_channels: 8,
                knobs,
            },
            ensemble_train: TrainConfig {
                learning_rate: 3e-3,
                adam_beta1: 0.9,
                adam_beta2: 0.999,
                adam_eps: 1e-8,
                epochs: 300,
                segment_length: 8192,
                batch_size: 8,
                w_mse: 1.0,
                w_mel_loss: 0.1,
                mel_scales: mel_scales.clone(),
                seed: 0,
            },
            final_train: TrainConfig {
                learning_rate: 1e-3,
                adam_beta1: 0.9,
                adam_beta2: 0.999,
                adam_eps: 1e-8,
                epochs: 300,
                segment_length: 8192,
                batch_size: 8,
                w_mse: 1.0,
                w_mel_loss: 0.1,
                mel_scales,
                seed: 0,
            },
            acquire: AcquireConfig {
                restarts: 10,
                steps: 100,
                step_size: 0.05,
                adam_beta1: 0.9,
                adam_beta2: 0.999,
                adam_eps: 1e-8,
                excerpt_start: 2048,
                excerpt_len,
                dedupe_threshold: 0.1,
                max_per_round: None,
                seed: 0,
            },
            disagreement: DisagreementWeights {
                w_waveform: 1.0,
                w_mel: 1.0 / (acquire_mel.n_mels * frames) as f64,
            },
            acquire_mel,
            oracle: OracleKind::Synthetic { amp: SynthAmpConfig::default_at(sr) },
            initial_points: 10,
            round_caps: None,
            checkpoint_rounds: vec![0, 2, 10],
            input_seconds: 10.0,
            test_clips: 5,
            test_clip_seconds: 20.0,
            test_settings: 200,
        }
    }

    /// The 10 -> 25 -> 75 dataset schedule: caps 8, 7 for the first two
    /// rounds, then 7, 6, 6, 6, 6, 6, 6, 7 to land exactly on 75 after
    /// round 10.
    pub fn schedule_10_25_75() -> Vec<usize> {
        vec![8, 7, 7, 6, 6, 6, 6, 6, 6, 7]
    }

    pub fn k(&self) -> usize {
        self.knob_labels.len()
    }

    pub fn spec_for(&self, arch: ArchKind) -> ModelSpec {
        match arch {
            ArchKind::Lstm => ModelSpec::Lstm(self.lstm_spec.clone()),
            ArchKind::WaveNet => ModelSpec::WaveNet(self.wavenet_spec.clone()),
        }
    }

    /// Cap on accepted proposals for a 1-based round index.
    pub fn cap_for_round(&self, round: u32) -> Option<usize> {
        self.round_caps.as_ref().map(|caps| {
            debug_assert!(!caps.is_empty());
            caps[((round - 1) as usize) % caps.len()]
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.knob_labels.is_empty() {
            return Err(ConfigError::Invalid("knob_labels must not be empty".into()));
        }
        for (i, l) in self.knob_labels.iter().enumerate() {
            if self.knob_labels[..i].contains(l) {
                return Err(ConfigError::Invalid(format!("duplicate knob label {l:?}")));
            }
        }
        if self.ensemble_size < 2 {
            return Err(ConfigError::Invalid(format!(
                "ensemble_size must be >= 2, got {}",
                self.ensemble_size
            )));
        }
        if self.initial_points == 0 {
            return Err(ConfigError::Invalid("initial_points must be >= 1".into()));
        }
        for r in &self.checkpoint_rounds {
            if *r > self.rounds {
                return Err(ConfigError::Invalid(format!(
                    "checkpoint round {r} outside 0..={}",
                    self.rounds
                )));
            }
        }
        if let Some(caps) = &self.round_caps {
            if caps.is_empty() || caps.contains(&0) {
                return Err(ConfigError::Invalid("round_caps must be non-empty and positive".into()));
            }
        }
        let k = self.k();
        if self.lstm_spec.knobs != k || self.wavenet_spec.knobs != k {
            return Err(ConfigError::Invalid(format!(
                "model specs expect {} / {} knobs but {} labels are configured",
                self.lstm_spec.knobs, self.wavenet_spec.knobs, k
            )));
        }
        if let OracleKind::Synthetic { amp } = &self.oracle {
            if amp.sample_rate != self.sample_rate {
                return Err(ConfigError::Invalid(format!(
                    "synthetic amp runs at {} Hz but the experiment at {} Hz",
                    amp.sample_rate, self.sample_rate
                )));
            }
            if k != 6 {
                return Err(ConfigError::Invalid(
                    "the synthetic amp defines exactly 6 knobs (Gain, Bass, Mid, Treble, Master, Presence)".into(),
                ));
            }
        }
        let input_samples = (self.input_seconds * self.sample_rate as f64) as usize;
        if self.acquire.excerpt_start + self.acquire.excerpt_len > input_samples {
            return Err(ConfigError::Invalid(format!(
                "acquisition excerpt {}..{} exceeds the {}-sample input",
                self.acquire.excerpt_start,
                self.acquire.excerpt_start + self.acquire.excerpt_len,
                input_samples
            )));
        }
        if self.test_clips == 0 || self.test_settings == 0 || self.test_clip_seconds <= 0.0 {
            return Err(ConfigError::Invalid("test set must be non-empty".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let name = path.display().to_string();
        let bytes = std::fs::read(path).map_err(|source| ConfigError::Io { path: name.clone(), source })?;
        let cfg: ExperimentConfig =
            serde_json::from_slice(&bytes).map_err(|e| ConfigError::Parse { path: name, detail: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        let name = path.display().to_string();
        let json = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, json + "\n").map_err(|source| ConfigError::Io { path: name, source })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_default_is_valid_and_round_trips() {
        let cfg = ExperimentConfig::desk_default(7);
        cfg.validate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        cfg.save(&path).unwrap();
        let back = ExperimentConfig::load(&path).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn schedule_sums_to_the_paper_sizes() {
        let caps = ExperimentConfig::schedule_10_25_75();
        assert_eq!(caps.len(), 10);
        assert_eq!(10 + caps[..2].iter().sum::<usize>(), 25);
        assert_eq!(10 + caps.iter().sum::<usize>(), 75);
    }

    #[test]
    fn bad_configs_rejected() {
        let mut cfg = ExperimentConfig::desk_default(1);
        cfg.ensemble_size = 1;
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::desk_default(1);
        cfg.checkpoint_rounds = vec![11];
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::desk_default(1);
        cfg.lstm_spec.knobs = 4;
        assert!(cfg.validate().is_err());
    }
}
