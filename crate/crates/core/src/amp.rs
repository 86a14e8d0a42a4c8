//! Ground-truth labelers.
//!
//! [`synth_amp_process`] is a deterministic synthetic amp: log-linear pregain
//! driven by the Gain knob into a tanh waveshaper, a four-band tone stack
//! (bass low shelf, mid peaking, treble and presence high shelves, all with
//! gains affine-in-dB in their knob), and a master output stage (a second
//! soft clip whose drive and level both rise with the Master knob). The
//! chain is zero-preserving, smooth in every knob, and bounded below 1.0.
//!
//! For capturing a real amp instead, [`export_request_manifest`] writes the
//! input signal and a JSON work order; [`ingest_recordings`] validates the
//! returned takes all-or-nothing and pairs them with their knob vectors.
//!
//! Knob order is fixed: Gain, Bass, Mid, Treble, Master, Presence.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{read_wav, write_wav, AudioError, AudioSignal, WavEncoding};
use crate::knob::KnobVector;

#[derive(Debug, Error)]
pub enum AmpError {
    #[error("signal sample rate {signal} Hz does not match amp config {cfg} Hz")]
    RateMismatch { cfg: u32, signal: u32 },
    #[error("synthetic amp expects 6 knobs (Gain, Bass, Mid, Treble, Master, Presence), got {0}")]
    KnobCount(usize),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest parse error in {path}: {detail}")]
    ManifestParse { path: String, detail: String },
    #[error("input checksum mismatch: manifest has {expected}, directory input hashes to {got}")]
    ChecksumMismatch { expected: String, got: String },
    #[error("ingest failed for round {round}:\n{}", errors.join("\n"))]
    Ingest { round: u32, errors: Vec<String> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Waveshaper {
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShelfSpec {
    pub corner_hz: f64,
    /// Full swing in dB: knob 0 gives -db_range, knob 1 gives +db_range.
    pub db_range: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakSpec {
    pub corner_hz: f64,
    pub db_range: f64,
    pub q: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MasterLaw {
    /// Output-stage drive, log-linear in the Master knob.
    pub drive_min: f64,
    pub drive_max: f64,
    /// Output level, affine in the Master knob; max must stay <= 1.
    pub level_min: f64,
    pub level_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthAmpConfig {
    pub version: u32,
    pub sample_rate: u32,
    /// Pregain range, log-linear in the Gain knob.
    pub drive_range: (f64, f64),
    pub shaper: Waveshaper,
    pub bass: ShelfSpec,
    pub mid: PeakSpec,
    pub treble: ShelfSpec,
    pub presence: ShelfSpec,
    pub master: MasterLaw,
}

impl SynthAmpConfig {
    pub fn default_at(sample_rate: u32) -> Self {
        SynthAmpConfig {
            version: 1,
            sample_rate,
            drive_range: (1.0, 50.0),
            shaper: Waveshaper::Tanh,
            bass: ShelfSpec { corner_hz: 100.0, db_range: 12.0 },
            mid: PeakSpec { corner_hz: 800.0, db_range: 12.0, q: 0.707 },
            treble: ShelfSpec { corner_hz: 3000.0, db_range: 15.0 },
            presence: ShelfSpec { corner_hz: 6000.0, db_range: 9.0 },
            master: MasterLaw { drive_min: 0.6, drive_max: 5.0, level_min: 0.15, level_max: 0.9 },
        }
    }
}

// ---- filters ---------------------------------------------------------------

/// Biquad coefficients, normalized (a0 = 1). First-order sections set the
/// second-order terms to zero.
#[derive(Debug, Clone, Copy)]
pub struct FilterCoeffs {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl FilterCoeffs {
    /// First-order low shelf: DC gain = `gain_db`, unity at high frequency.
    pub fn low_shelf(corner_hz: f64, gain_db: f64, fs: f64) -> Self {
        let a = 10f64.powf(gain_db / 20.0);
        let kt = (std::f64::consts::PI * corner_hz / fs).tan();
        let norm = 1.0 + kt;
        FilterCoeffs {
            b0: (1.0 + a * kt) / norm,
            b1: (a * kt - 1.0) / norm,
            b2: 0.0,
            a1: (kt - 1.0) / norm,
            a2: 0.0,
        }
    }

    /// First-order high shelf: unity at DC, `gain_db` at high frequency.
    pub fn high_shelf(corner_hz: f64, gain_db: f64, fs: f64) -> Self {
        let a = 10f64.powf(gain_db / 20.0);
        let kt = (std::f64::consts::PI * corner_hz / fs).tan();
        let norm = 1.0 + kt;
        FilterCoeffs {
            b0: (a + kt) / norm,
            b1: (kt - a) / norm,
            b2: 0.0,
            a1: (kt - 1.0) / norm,
            a2: 0.0,
        }
    }

    /// Peaking EQ biquad.
    pub fn peaking(corner_hz: f64, gain_db: f64, q: f64, fs: f64) -> Self {
        let a = 10f64.powf(gain_db / 40.0);
        let w0 = 2.0 * std::f64::consts::PI * corner_hz / fs;
        let alpha = w0.sin() / (2.0 * q);
        let a0 = 1.0 + alpha / a;
        FilterCoeffs {
            b0: (1.0 + alpha * a) / a0,
            b1: -2.0 * w0.cos() / a0,
            b2: (1.0 - alpha * a) / a0,
            a1: -2.0 * w0.cos() / a0,
            a2: (1.0 - alpha / a) / a0,
        }
    }

    /// Largest pole magnitude; < 1 means stable.
    pub fn pole_radius(&self) -> f64 {
        if self.a2 == 0.0 {
            self.a1.abs()
        } else {
            // Roots of z^2 + a1 z + a2.
            let disc = self.a1 * self.a1 - 4.0 * self.a2;
            if disc >= 0.0 {
                let r = disc.sqrt();
                ((-self.a1 + r) / 2.0).abs().max(((-self.a1 - r) / 2.0).abs())
            } else {
                self.a2.sqrt()
            }
        }
    }

    /// Causal direct-form-1 run from zero state.
    pub fn process(&self, x: &mut [f64]) {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        for v in x.iter_mut() {
            let x0 = *v;
            let y0 = self.b0 * x0 + self.b1 * x1 + self.b2 * x2 - self.a1 * y1 - self.a2 * y2;
            x2 = x1;
            x1 = x0;
            y2 = y1;
            y1 = y0;
            *v = y0;
        }
    }
}

/// Knob gain in dB, affine in the knob: -range at 0, +range at 1.
fn knob_db(range: f64, knob: f64) -> f64 {
    range * (2.0 * knob - 1.0)
}

/// The tone-stack filter sections for a knob setting, in processing order.
pub fn tone_stack(cfg: &SynthAmpConfig, g: &KnobVector) -> [FilterCoeffs; 4] {
    let fs = cfg.sample_rate as f64;
    [
        FilterCoeffs::low_shelf(cfg.bass.corner_hz, knob_db(cfg.bass.db_range, g.get(1)), fs),
        FilterCoeffs::peaking(cfg.mid.corner_hz, knob_db(cfg.mid.db_range, g.get(2)), cfg.mid.q, fs),
        FilterCoeffs::high_shelf(cfg.treble.corner_hz, knob_db(cfg.treble.db_range, g.get(3)), fs),
        FilterCoeffs::high_shelf(cfg.presence.corner_hz, knob_db(cfg.presence.db_range, g.get(5)), fs),
    ]
}

/// Run the full amp chain. Pure: same input and knobs give bit-identical output.
pub fn synth_amp_process(x: &AudioSignal, g: &KnobVector, cfg: &SynthAmpConfig) -> Result<AudioSignal, AmpError> {
    if x.sample_rate() != cfg.sample_rate {
        return Err(AmpError::RateMismatch { cfg: cfg.sample_rate, signal: x.sample_rate() });
    }
    if g.k() != 6 {
        return Err(AmpError::KnobCount(g.k()));
    }

    let (d_min, d_max) = cfg.drive_range;
    let drive = d_min * (d_max / d_min).powf(g.get(0));
    let mut buf: Vec<f64> = match cfg.shaper {
        Waveshaper::Tanh => x.samples().iter().map(|s| (drive * s).tanh()).collect(),
    };

    for f in tone_stack(cfg, g) {
        f.process(&mut buf);
    }

    let m = g.get(4);
    let out_drive = cfg.master.drive_min * (cfg.master.drive_max / cfg.master.drive_min).powf(m);
    let out_level = cfg.master.level_min + (cfg.master.level_max - cfg.master.level_min) * m;
    for v in buf.iter_mut() {
        *v = out_level * (out_drive * *v).tanh();
    }

    Ok(AudioSignal::new(buf, x.sample_rate())?)
}

// ---- crc32 -----------------------------------------------------------------

/// IEEE CRC-32 (the zip/png polynomial), table-driven.
pub fn crc32(bytes: &[u8]) -> u32 {
    const fn table() -> [u32; 256] {
        let mut t = [0u32; 256];
        let mut i = 0;
        while i < 256 {
            let mut c = i as u32;
            let mut j = 0;
            while j < 8 {
                c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
                j += 1;
            }
            t[i] = c;
            i += 1;
        }
        t
    }
    const TABLE: [u32; 256] = table();
    let mut c = 0xFFFF_FFFFu32;
    for b in bytes {
        c = TABLE[((c ^ *b as u32) & 0xFF) as usize] ^ (c >> 8);
    }
    c ^ 0xFFFF_FFFF
}

// ---- request manifest -------------------------------------------------------

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRequest {
    pub id: u32,
    pub knobs: Vec<f64>,
    pub filename: String,
}

/// Work order for labeling one round's proposals on an external amp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestManifest {
    pub version: u32,
    pub round: u32,
    pub checksum_algorithm: String,
    /// Hex CRC-32 of the exported input WAV bytes.
    pub input_checksum: String,
    pub input_filename: String,
    pub sample_rate: u32,
    pub input_samples: usize,
    pub requests: Vec<ManifestRequest>,
}

impl RequestManifest {
    pub fn path_for(dir: &Path, round: u32) -> PathBuf {
        dir.join(format!("requests_round{round}.json"))
    }

    pub fn load(path: &Path) -> Result<Self, AmpError> {
        let name = path.display().to_string();
        let bytes = std::fs::read(path).map_err(|source| AmpError::Io { path: name.clone(), source })?;
        serde_json::from_slice(&bytes).map_err(|e| AmpError::ManifestParse { path: name, detail: e.to_string() })
    }

    pub fn save(&self, path: &Path) -> Result<(), AmpError> {
        let name = path.display().to_string();
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, json).map_err(|source| AmpError::Io { path: name, source })
    }
}

/// Expected recording filename for one request of one round.
pub fn recording_filename(round: u32, id: u32) -> String {
    format!("round{round}_req{id}.wav")
}

/// Write the input signal and the round's request manifest into `dir`.
pub fn export_request_manifest(
    batch: &[KnobVector],
    round: u32,
    x: &AudioSignal,
    dir: &Path,
) -> Result<RequestManifest, AmpError> {
    std::fs::create_dir_all(dir).map_err(|source| AmpError::Io { path: dir.display().to_string(), source })?;
    let input_filename = format!("input_round{round}.wav");
    let input_path = dir.join(&input_filename);
    write_wav(&input_path, x, WavEncoding::Float32)?;
    let bytes = std::fs::read(&input_path)
        .map_err(|source| AmpError::Io { path: input_path.display().to_string(), source })?;
    let manifest = RequestManifest {
        version: MANIFEST_VERSION,
        round,
        checksum_algorithm: "crc32".into(),
        input_checksum: format!("{:08X}", crc32(&bytes)),
        input_filename,
        sample_rate: x.sample_rate(),
        input_samples: x.len(),
        requests: batch
            .iter()
            .enumerate()
            .map(|(i, kv)| ManifestRequest {
                id: i as u32,
                knobs: kv.values().to_vec(),
                filename: recording_filename(round, i as u32),
            })
            .collect(),
    };
    manifest.save(&RequestManifest::path_for(dir, round))?;
    Ok(manifest)
}

/// Read back one round of recordings. All-or-nothing: every problem is
/// collected and reported together; on success each request yields a label
/// trimmed or zero-padded to the input length.
pub fn ingest_recordings(
    manifest: &RequestManifest,
    dir: &Path,
) -> Result<Vec<(KnobVector, AudioSignal)>, AmpError> {
    // The exported input must still be present and unmodified.
    let input_path = dir.join(&manifest.input_filename);
    let bytes = std::fs::read(&input_path)
        .map_err(|source| AmpError::Io { path: input_path.display().to_string(), source })?;
    let got = format!("{:08X}", crc32(&bytes));
    if got != manifest.input_checksum {
        return Err(AmpError::ChecksumMismatch { expected: manifest.input_checksum.clone(), got });
    }

    let tolerance = manifest.sample_rate as usize / 2; // +-0.5 s
    let mut errors = Vec::new();
    let mut labeled = Vec::new();
    for req in &manifest.requests {
        let path = dir.join(&req.filename);
        if !path.exists() {
            errors.push(format!("request {}: missing file {}", req.id, req.filename));
            continue;
        }
        let sig = match read_wav(&path) {
            Ok(s) => s,
            Err(e) => {
                errors.push(format!("request {}: {e}", req.id));
                continue;
            }
        };
        if sig.sample_rate() != manifest.sample_rate {
            errors.push(format!(
                "request {}: sample rate {} Hz, expected {} Hz",
                req.id,
                sig.sample_rate(),
                manifest.sample_rate
            ));
            continue;
        }
        let want = manifest.input_samples;
        let len_diff = sig.len().abs_diff(want);
        if len_diff > tolerance {
            errors.push(format!(
                "request {}: length {} samples differs from expected {} by more than 0.5 s",
                req.id,
                sig.len(),
                want
            ));
            continue;
        }
        let knobs = match KnobVector::labeled(req.knobs.clone()) {
            Ok(kv) => kv,
            Err(e) => {
                errors.push(format!("request {}: {e}", req.id));
                continue;
            }
        };
        let mut samples = sig.into_samples();
        samples.resize(want, 0.0);
        match AudioSignal::new(samples, manifest.sample_rate) {
            Ok(s) => labeled.push((knobs, s)),
            Err(e) => errors.push(format!("request {}: {e}", req.id)),
        }
    }
    if !errors.is_empty() {
        return Err(AmpError::Ingest { round: manifest.round, errors });
    }
    Ok(labeled)
}
