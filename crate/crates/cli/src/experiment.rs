//! The active-learning loop, persisted and resumable.
//!
//! Round 0 is the initial uniform-random dataset. Each later round trains an
//! ensemble on the current dataset, proposes knob settings by disagreement
//! ascent, labels them through the configured oracle, and extends the
//! dataset. Checkpoint rounds additionally retrain the final model on the
//! dataset so far. Every artifact lands in the run directory, and any prefix
//! of the loop can be re-entered: rerunning with the same config reproduces
//! the same bytes.

use std::path::{Path, PathBuf};

use ampforge_core::acquire::{
    dedupe_optima, disagreement, propose_batch, write_acquisition_log, AcquireError, Predictor, RestartLog,
};
use ampforge_core::amp::{
    export_request_manifest, ingest_recordings, recording_filename, synth_amp_process, AmpError, RequestManifest,
};
use ampforge_core::audio::{read_wav, write_wav, AudioError, AudioSignal, WavEncoding};
use ampforge_core::knob::{KnobError, KnobVector};
use ampforge_core::mel::{MelError, MelTransform};
use ampforge_core::models::{save_model, Model, ModelError};
use ampforge_core::train::{train_ensemble, train_model, TrainError, TrainReport};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig, OracleKind};
use crate::dataset::{DatasetEntry, DatasetError, DatasetManifest, Source};
use crate::rundir::{RunDir, RunDirError, RunLock};
use crate::seeds;
use crate::signals::composite_signal;

/// Extra restart batches allowed while topping a capped round up to its
/// exact size before falling back to random distinct settings.
const MAX_ACQUIRE_ATTEMPTS: u32 = 4;

#[derive(Debug, Error)]
pub enum DriverError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    RunDir(#[from] RunDirError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Amp(#[from] AmpError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Acquire(#[from] AcquireError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mel(#[from] MelError),
    #[error(transparent)]
    Knob(#[from] KnobError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("round {0} state error: {1}")]
    RoundState(u32, String),
    #[error("nothing to ingest: no round is awaiting recordings")]
    NothingPending,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DriverError + '_ {
    move |source| DriverError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub g: Vec<f64>,
    pub d_star: f64,
    /// False for random top-up fills used to hit an exact cap.
    pub from_ascent: bool,
}

/// Persisted per-round record (rounds/rNN/round.json).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub ensemble_seed: u64,
    pub ensemble_throughput: f64,
    pub proposals: Vec<Proposal>,
    pub acquire_attempts: u32,
}

impl RoundRecord {
    pub fn path(rd: &RunDir, round: u32) -> PathBuf {
        rd.round_dir(round).join("round.json")
    }

    pub fn load(rd: &RunDir, round: u32) -> Result<Option<Self>, DriverError> {
        let path = Self::path(rd, round);
        if !path.exists() {
            return Ok(None);
        }
        let bytes = std::fs::read(&path).map_err(io_err(&path))?;
        let rec: RoundRecord = serde_json::from_slice(&bytes)
            .map_err(|e| DriverError::RoundState(round, format!("round.json parse: {e}")))?;
        Ok(Some(rec))
    }

    pub fn save(&self, rd: &RunDir) -> Result<(), DriverError> {
        let dir = rd.round_dir(self.round);
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let path = Self::path(rd, self.round);
        let json = serde_json::to_string_pretty(self).expect("round record serializes");
        std::fs::write(&path, json + "\n").map_err(io_err(&path))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunOutcome {
    Complete,
    /// Manual oracle: requests exported, resume after `ingest`.
    AwaitingIngest { round: u32 },
    Stopped { after_round: u32 },
}

pub struct Driver {
    rd: RunDir,
    pub cfg: ExperimentConfig,
    input: AudioSignal,
}

impl Driver {
    /// Open (and lock) an initialized run directory, synthesizing the input
    /// signal on first use.
    pub fn open(rd: RunDir) -> Result<(Self, RunLock), DriverError> {
        rd.require_initialized()?;
        rd.ensure_layout()?;
        let lock = rd.lock()?;
        let cfg = ExperimentConfig::load(&rd.config_path())?;
        let input_path = rd.input_path();
        if !input_path.exists() {
            let sig = composite_signal(cfg.input_seconds, cfg.sample_rate, seeds::input_signal_seed(cfg.seed));
            write_wav(&input_path, &sig, WavEncoding::Float32)?;
        }
        let input = read_wav(&input_path)?;
        Ok((Driver { rd, cfg, input }, lock))
    }

    pub fn run_dir(&self) -> &RunDir {
        &self.rd
    }

    pub fn input(&self) -> &AudioSignal {
        &self.input
    }

    pub fn dataset(&self) -> Result<Option<DatasetManifest>, DriverError> {
        if DatasetManifest::manifest_path(self.rd.root()).exists() {
            Ok(Some(DatasetManifest::load(self.rd.root())?))
        } else {
            Ok(None)
        }
    }

    fn new_manifest(&self) -> Result<DatasetManifest, DriverError> {
        let input_path = self.rd.input_path();
        let bytes = std::fs::read(&input_path).map_err(io_err(&input_path))?;
        Ok(DatasetManifest::new("input.wav", &bytes, self.cfg.knob_labels.clone()))
    }

    /// Label a set of knob vectors with the synthetic amp and append them to
    /// the dataset, then snapshot the manifest into the round directory.
    fn label_and_append_synth(
        &self,
        manifest: &mut DatasetManifest,
        settings: &[KnobVector],
        round: u32,
        source: Source,
    ) -> Result<(), DriverError> {
        let amp = match &self.cfg.oracle {
            OracleKind::Synthetic { amp } => amp.clone(),
            OracleKind::Manual => {
                return Err(DriverError::RoundState(round, "synthetic labeling requested on a manual-oracle run".into()))
            }
        };
        for (i, kv) in settings.iter().enumerate() {
            let y = synth_amp_process(&self.input, kv, &amp)?;
            let rel = format!("labels/{}", recording_filename(round, i as u32));
            write_wav(&self.rd.root().join(&rel), &y, WavEncoding::Float32)?;
            manifest.entries.push(DatasetEntry { g: kv.values().to_vec(), output: rel, round, source });
        }
        manifest.save(self.rd.root())?;
        self.snapshot_round_dataset(manifest, round)?;
        Ok(())
    }

    fn append_ingested(
        &self,
        manifest: &mut DatasetManifest,
        labeled: &[(KnobVector, AudioSignal)],
        round: u32,
        source: Source,
    ) -> Result<(), DriverError> {
        for (i, (kv, y)) in labeled.iter().enumerate() {
            let rel = format!("labels/{}", recording_filename(round, i as u32));
            write_wav(&self.rd.root().join(&rel), y, WavEncoding::Float32)?;
            manifest.entries.push(DatasetEntry { g: kv.values().to_vec(), output: rel, round, source });
        }
        manifest.save(self.rd.root())?;
        self.snapshot_round_dataset(manifest, round)?;
        Ok(())
    }

    fn snapshot_round_dataset(&self, manifest: &DatasetManifest, round: u32) -> Result<(), DriverError> {
        let dir = self.rd.round_dir(round);
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let path = dir.join("dataset.json");
        let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
        std::fs::write(&path, json + "\n").map_err(io_err(&path))
    }

    /// Initial uniform-random settings for round 0.
    pub fn initial_settings(&self) -> Result<Vec<KnobVector>, DriverError> {
        Ok(crate::sampling::sample_settings(
            self.cfg.initial_points,
            self.cfg.k(),
            crate::sampling::SettingsDist::Uniform,
            seeds::initial_points_seed(self.cfg.seed),
        )
        .expect("uniform sampling cannot fail"))
    }

    /// Make sure the round-0 dataset exists. With the manual oracle this
    /// exports the round-0 requests and reports AwaitingIngest.
    pub fn ensure_initial(&self) -> Result<Option<RunOutcome>, DriverError> {
        if self.dataset()?.is_some() {
            return Ok(None);
        }
        let settings = self.initial_settings()?;
        match &self.cfg.oracle {
            OracleKind::Synthetic { .. } => {
                let mut manifest = self.new_manifest()?;
                self.label_and_append_synth(&mut manifest, &settings, 0, Source::InitialRandom)?;
                Ok(None)
            }
            OracleKind::Manual => {
                self.export_requests_for(0, &settings)?;
                Ok(Some(RunOutcome::AwaitingIngest { round: 0 }))
            }
        }
    }

    fn export_requests_for(&self, round: u32, settings: &[KnobVector]) -> Result<RequestManifest, DriverError> {
        Ok(export_request_manifest(settings, round, &self.input, &self.rd.exchange_dir())?)
    }

    /// Train the round's ensemble on the current dataset.
    pub fn train_round_ensemble(&self, round: u32) -> Result<(Vec<Model>, f64), DriverError> {
        let manifest = self
            .dataset()?
            .ok_or_else(|| DriverError::RoundState(round, "no dataset yet".into()))?;
        let data = manifest.materialize(self.rd.root())?;
        let mut cfg = self.cfg.ensemble_train.clone();
        cfg.seed = seeds::ensemble_seed(self.cfg.seed, round);
        let spec = self.cfg.spec_for(self.cfg.ensemble_arch);
        let (models, report) = train_ensemble(&spec, self.cfg.ensemble_size, &data, &cfg)?;
        Ok((models, report.throughput))
    }

    /// Propose this round's knob settings: restarted disagreement ascent,
    /// deduplication, and (when a cap is configured) top-up to the exact cap.
    /// Reuses a previously persisted record so that interrupted runs resume
    /// with identical proposals.
    pub fn propose_round(&self, round: u32) -> Result<RoundRecord, DriverError> {
        if let Some(existing) = RoundRecord::load(&self.rd, round)? {
            return Ok(existing);
        }
        let (members, ensemble_throughput) = self.train_round_ensemble(round)?;
        let member_refs: Vec<&dyn Predictor> = members.iter().map(|m| m as &dyn Predictor).collect();
        let mel = MelTransform::new(&self.cfg.acquire_mel, self.cfg.sample_rate)?;
        let mel_opt = if self.cfg.disagreement.w_mel > 0.0 { Some(&mel) } else { None };
        let cap = self.cfg.cap_for_round(round);
        let x = self.input.samples();

        let mut pool: Vec<(KnobVector, f64)> = Vec::new();
        let mut all_logs: Vec<RestartLog> = Vec::new();
        let mut attempts = 0u32;
        for attempt in 0..MAX_ACQUIRE_ATTEMPTS {
            let mut acq = self.cfg.acquire.clone();
            acq.seed = seeds::acquire_seed(self.cfg.seed, round, attempt);
            acq.max_per_round = None;
            let result = propose_batch(&member_refs, x, self.cfg.k(), &acq, &self.cfg.disagreement, mel_opt)?;
            let offset = (attempt as usize) * self.cfg.acquire.restarts;
            for mut log in result.restarts {
                log.restart += offset;
                if log.error.is_none() {
                    pool.push((
                        KnobVector::new(log.knobs.clone(), self.cfg.knob_labels.clone())?,
                        log.d_star,
                    ));
                }
                all_logs.push(log);
            }
            attempts = attempt + 1;
            let distinct = dedupe_optima(&pool, self.cfg.acquire.dedupe_threshold);
            match cap {
                Some(c) if distinct.len() < c => continue,
                _ => break,
            }
        }

        let mut accepted = dedupe_optima(&pool, self.cfg.acquire.dedupe_threshold);
        if let Some(c) = cap {
            accepted.truncate(c);
        }
        // Mark accepted restarts in the merged log (first match by value wins).
        for kv in &accepted {
            if let Some(log) = all_logs
                .iter_mut()
                .find(|l| l.error.is_none() && !l.accepted && l.knobs == kv.values())
            {
                log.accepted = true;
            }
        }
        let mut proposals: Vec<Proposal> = Vec::new();
        for kv in &accepted {
            let d = pool
                .iter()
                .find(|(p, _)| p.values() == kv.values())
                .map(|(_, d)| *d)
                .unwrap_or(f64::NAN);
            proposals.push(Proposal { g: kv.values().to_vec(), d_star: d, from_ascent: true });
        }

        // Fallback fill: seeded random distinct settings, still labeled as
        // active-round data, flagged as non-ascent in the record.
        if let Some(c) = cap {
            let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(self.cfg.seed, &[seeds::tag::TOPUP, round as u64]));
            let excerpt = &x[self.cfg.acquire.excerpt_start..self.cfg.acquire.excerpt_start + self.cfg.acquire.excerpt_len];
            while proposals.len() < c {
                let vals: Vec<f64> = (0..self.cfg.k()).map(|_| rng.gen_range(0.0..=1.0)).collect();
                let kv = KnobVector::new(vals, self.cfg.knob_labels.clone())?;
                let far = proposals.iter().all(|p| {
                    let existing = KnobVector::new(p.g.clone(), self.cfg.knob_labels.clone()).expect("stored vectors valid");
                    existing.euclidean_distance(&kv) >= self.cfg.acquire.dedupe_threshold
                });
                if far {
                    let d = disagreement(&member_refs, excerpt, &kv, &self.cfg.disagreement, mel_opt)?;
                    proposals.push(Proposal { g: kv.values().to_vec(), d_star: d, from_ascent: false });
                }
            }
        }

        let dir = self.rd.round_dir(round);
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        write_acquisition_log(&dir.join("acquisition.csv"), &all_logs, self.cfg.k())
            .map_err(|source| DriverError::Io { path: dir.join("acquisition.csv").display().to_string(), source })?;

        let record = RoundRecord {
            round,
            ensemble_seed: seeds::ensemble_seed(self.cfg.seed, round),
            ensemble_throughput,
            proposals,
            acquire_attempts: attempts,
        };
        record.save(&self.rd)?;
        Ok(record)
    }

    fn record_settings(&self, record: &RoundRecord) -> Result<Vec<KnobVector>, DriverError> {
        record
            .proposals
            .iter()
            .map(|p| Ok(KnobVector::new(p.g.clone(), self.cfg.knob_labels.clone())?))
            .collect()
    }

    /// Label a proposed round with the synthetic oracle.
    pub fn label_round_synth(&self, record: &RoundRecord) -> Result<(), DriverError> {
        let mut manifest = self
            .dataset()?
            .ok_or_else(|| DriverError::RoundState(record.round, "no dataset yet".into()))?;
        if manifest.entries_for_round(record.round).count() > 0 {
            return Ok(());
        }
        let settings = self.record_settings(record)?;
        self.label_and_append_synth(&mut manifest, &settings, record.round, Source::Active)
    }

    /// Export the request manifest for a proposed-but-unlabeled round.
    pub fn export_round_requests(&self, record: &RoundRecord) -> Result<RequestManifest, DriverError> {
        let settings = self.record_settings(record)?;
        self.export_requests_for(record.round, &settings)
    }

    /// The proposed round still missing its labels, if any.
    pub fn pending_round(&self) -> Result<Option<RoundRecord>, DriverError> {
        let manifest = self.dataset()?;
        let next = match &manifest {
            None => 0,
            Some(m) => m.last_round().map_or(0, |r| r + 1),
        };
        if next == 0 {
            // Initial round pending if a round-0 manifest was exported.
            let path = RequestManifest::path_for(&self.rd.exchange_dir(), 0);
            if path.exists() {
                let settings = self.initial_settings()?;
                return Ok(Some(RoundRecord {
                    round: 0,
                    ensemble_seed: 0,
                    ensemble_throughput: 0.0,
                    proposals: settings
                        .iter()
                        .map(|kv| Proposal { g: kv.values().to_vec(), d_star: f64::NAN, from_ascent: false })
                        .collect(),
                    acquire_attempts: 0,
                }));
            }
            return Ok(None);
        }
        Ok(RoundRecord::load(&self.rd, next)?)
    }

    /// Import recordings for whichever round is awaiting them.
    pub fn ingest(&self, recordings_dir: &Path) -> Result<u32, DriverError> {
        let pending = self.pending_round()?.ok_or(DriverError::NothingPending)?;
        let round = pending.round;
        let manifest_path = RequestManifest::path_for(&self.rd.exchange_dir(), round);
        let req_manifest = RequestManifest::load(&manifest_path)?;
        let labeled = ingest_recordings(&req_manifest, recordings_dir)?;
        let mut manifest = match self.dataset()? {
            Some(m) => m,
            None => self.new_manifest()?,
        };
        let source = if round == 0 { Source::InitialRandom } else { Source::Active };
        self.append_ingested(&mut manifest, &labeled, round, source)?;
        Ok(round)
    }

    /// Train the final model on the current dataset. `tag_round` selects the
    /// seed stream and the checkpoint filename; the plain final model uses
    /// the configured total round count.
    pub fn train_final_at(&self, tag_round: u32) -> Result<(Model, TrainReport), DriverError> {
        let manifest = self
            .dataset()?
            .ok_or_else(|| DriverError::RoundState(tag_round, "no dataset yet".into()))?;
        let data = manifest.materialize(self.rd.root())?;
        let mut cfg = self.cfg.final_train.clone();
        cfg.seed = seeds::final_train_seed(self.cfg.seed, tag_round);
        let spec = self.cfg.spec_for(self.cfg.final_arch);
        Ok(train_model(&spec, &data, &cfg)?)
    }

    /// Train and archive any checkpoint models whose rounds are complete but
    /// whose files are missing.
    pub fn train_missing_checkpoints(&self) -> Result<(), DriverError> {
        let Some(manifest) = self.dataset()? else { return Ok(()) };
        let Some(done) = manifest.last_round() else { return Ok(()) };
        for r in self.cfg.checkpoint_rounds.clone() {
            if r <= done && !self.rd.checkpoint_model_path(r).exists() {
                let (model, _) = self.train_final_at(r)?;
                save_model(&model, &self.rd.checkpoint_model_path(r))?;
            }
        }
        Ok(())
    }

    /// Drive the whole loop. Stops early for manual labeling or at
    /// `stop_after` (useful for resumability checks and inspection).
    pub fn run(&self, stop_after: Option<u32>) -> Result<RunOutcome, DriverError> {
        if let Some(outcome) = self.ensure_initial()? {
            return Ok(outcome);
        }
        self.train_missing_checkpoints()?;
        if let Some(0) = stop_after {
            return Ok(RunOutcome::Stopped { after_round: 0 });
        }

        let mut done = self
            .dataset()?
            .and_then(|m| m.last_round())
            .expect("initial round exists");
        while done < self.cfg.rounds {
            let round = done + 1;
            let record = self.propose_round(round)?;
            match &self.cfg.oracle {
                OracleKind::Synthetic { .. } => self.label_round_synth(&record)?,
                OracleKind::Manual => {
                    self.export_round_requests(&record)?;
                    return Ok(RunOutcome::AwaitingIngest { round });
                }
            }
            self.train_missing_checkpoints()?;
            done = round;
            if stop_after == Some(round) {
                return Ok(RunOutcome::Stopped { after_round: round });
            }
        }

        // Final model on the full dataset.
        if !self.rd.final_model_path().exists() {
            let final_round = self.cfg.rounds;
            let checkpoint = self.rd.checkpoint_model_path(final_round);
            if self.cfg.checkpoint_rounds.contains(&final_round) && checkpoint.exists() {
                std::fs::copy(&checkpoint, self.rd.final_model_path())
                    .map_err(io_err(&self.rd.final_model_path()))?;
            } else {
                let (model, _) = self.train_final_at(final_round)?;
                save_model(&model, &self.rd.final_model_path())?;
            }
        }
        Ok(RunOutcome::Complete)
    }
}
