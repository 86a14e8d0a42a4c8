//! Mono audio signals and WAV file I/O.
//!
//! Supported on disk: RIFF/WAVE, mono, little-endian, PCM-16 or IEEE
//! float-32. PCM-16 decodes by dividing by 32768; float-32 round trips
//! bit-exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}: not a RIFF/WAVE file")]
    NotWave(String),
    #[error("{0}: truncated file ({1})")]
    Truncated(String, String),
    #[error("{0}: channels={1} unsupported (mono only)")]
    Channels(String, u16),
    #[error("{0}: unsupported codec (format tag {tag}, {bits} bits)", tag = .1, bits = .2)]
    Codec(String, u16, u16),
    #[error("audio signal must be non-empty")]
    Empty,
    #[error("audio signal contains non-finite samples")]
    NonFinite,
    #[error("sample rate must be positive")]
    BadRate,
}

/// Mono sampled waveform, nominal range [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioSignal {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioSignal {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, AudioError> {
        if samples.is_empty() {
            return Err(AudioError::Empty);
        }
        if !samples.iter().all(|s| s.is_finite()) {
            return Err(AudioError::NonFinite);
        }
        if sample_rate == 0 {
            return Err(AudioError::BadRate);
        }
        Ok(AudioSignal { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn rms(&self) -> f64 {
        (self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64).sqrt()
    }
}

/// On-disk sample encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

const FMT_PCM: u16 = 1;
const FMT_IEEE_FLOAT: u16 = 3;

pub fn read_wav(path: &Path) -> Result<AudioSignal, AudioError> {
    let name = path.display().to_string();
    let bytes = fs::read(path).map_err(|source| AudioError::Io { path: name.clone(), source })?;
    decode_wav(&bytes, &name)
}

fn decode_wav(bytes: &[u8], name: &str) -> Result<AudioSignal, AudioError> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(AudioError::NotWave(name.to_string()));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (tag, channels, rate, bits)
    let mut data: Option<&[u8]> = None;
    let mut pos = 12usize;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_start = pos + 8;
        let body_end = body_start + size;
        if body_end > bytes.len() {
            return Err(AudioError::Truncated(name.to_string(), format!("chunk {} claims {} bytes past EOF", String::from_utf8_lossy(id), body_end - bytes.len())));
        }
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(AudioError::Truncated(name.to_string(), "fmt chunk shorter than 16 bytes".into()));
                }
                let tag = u16::from_le_bytes(body[0..2].try_into().unwrap());
                let channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
                let rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
                fmt = Some((tag, channels, rate, bits));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // Chunks are word-aligned.
        pos = body_end + (size & 1);
    }

    let (tag, channels, rate, bits) = fmt.ok_or_else(|| AudioError::Truncated(name.to_string(), "missing fmt chunk".into()))?;
    let data = data.ok_or_else(|| AudioError::Truncated(name.to_string(), "missing data chunk".into()))?;
    if channels != 1 {
        return Err(AudioError::Channels(name.to_string(), channels));
    }

    let samples = match (tag, bits) {
        (FMT_PCM, 16) => {
            if data.len() % 2 != 0 {
                return Err(AudioError::Truncated(name.to_string(), "odd PCM-16 payload size".into()));
            }
            data.chunks_exact(2)
                .map(|c| i16::from_le_bytes(c.try_into().unwrap()) as f64 / 32768.0)
                .collect()
        }
        (FMT_IEEE_FLOAT, 32) => {
            if data.len() % 4 != 0 {
                return Err(AudioError::Truncated(name.to_string(), "float-32 payload size not a multiple of 4".into()));
            }
            data.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect()
        }
        _ => return Err(AudioError::Codec(name.to_string(), tag, bits)),
    };

    AudioSignal::new(samples, rate)
}

pub fn write_wav(path: &Path, signal: &AudioSignal, encoding: WavEncoding) -> Result<(), AudioError> {
    let name = path.display().to_string();
    let n = signal.len();
    let (tag, bits, payload): (u16, u16, Vec<u8>) = match encoding {
        WavEncoding::Pcm16 => {
            let mut p = Vec::with_capacity(n * 2);
            for s in signal.samples() {
                let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                p.extend_from_slice(&q.to_le_bytes());
            }
            (FMT_PCM, 16, p)
        }
        WavEncoding::Float32 => {
            let mut p = Vec::with_capacity(n * 4);
            for s in signal.samples() {
                p.extend_from_slice(&(*s as f32).to_le_bytes());
            }
            (FMT_IEEE_FLOAT, 32, p)
        }
    };

    let block_align = (bits / 8) as u16;
    let byte_rate = signal.sample_rate() * block_align as u32;
    let mut out = Vec::with_capacity(44 + payload.len());
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + payload.len()) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&signal.sample_rate().to_le_bytes());
    out.extend_from_slice(&byte_rate.to_le_bytes());
    out.extend_from_slice(&block_align.to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&payload);
    if payload.len() % 2 == 1 {
        out.push(0);
    }

    let mut f = fs::File::create(path).map_err(|source| AudioError::Io { path: name.clone(), source })?;
    f.write_all(&out).map_err(|source| AudioError::Io { path: name, source })
}
