//! Differentiable log-mel spectrograms and the multi-scale mel loss.
//!
//! The spectrogram path is: Hann-windowed frames -> power spectrum via an
//! explicit real-DFT matrix product -> triangular mel filterbank ->
//! log(power + floor). Everything is built from recorded graph ops, so
//! gradients flow back to the signal.
//!
//! Filterbank edges: the first and last bands are flattened outward (weight 1
//! between the band center and the range boundary) so the bank covers
//! [f_min, f_max] end to end; interior bands are plain triangles on the mel
//! scale.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, GraphError, TensorId};

#[derive(Debug, Error)]
pub enum MelError {
    #[error("invalid mel config: {0}")]
    BadConfig(String),
    #[error("mel band {band} captures no DFT bins (n_fft {n_fft}, n_mels {n_mels})")]
    EmptyBand { band: usize, n_fft: usize, n_mels: usize },
    #[error("signal length {t} shorter than n_fft {n_fft}")]
    SignalTooShort { t: usize, n_fft: usize },
    #[error("signal lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// One spectrogram resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
}

impl MelConfig {
    pub fn frames(&self, t: usize) -> Option<usize> {
        if t < self.n_fft {
            None
        } else {
            Some(1 + (t - self.n_fft) / self.hop)
        }
    }
}

/// The multi-resolution set used by the multi-scale mel loss: window lengths
/// 32..2048 paired with 5..320 mel bands, hop = window / 4, floor 1e-5.
pub fn multiscale_configs(sample_rate: u32) -> Vec<MelConfig> {
    let windows = [32usize, 64, 128, 256, 512, 1024, 2048];
    let mels = [5usize, 10, 20, 40, 80, 160, 320];
    windows
        .iter()
        .zip(mels)
        .map(|(w, m)| MelConfig {
            n_fft: *w,
            hop: w / 4,
            n_mels: m,
            f_min: 0.0,
            f_max: sample_rate as f64 / 2.0,
            log_floor: 1e-5,
        })
        .collect()
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

/// Precomputed windowed-DFT and filterbank matrices for one config at one
/// sample rate. Cheap to clone; matrices are shared.
#[derive(Clone)]
pub struct MelTransform {
    pub cfg: MelConfig,
    pub sample_rate: u32,
    n_bins: usize,
    /// [n_bins x n_fft], cos basis premultiplied by the Hann window.
    cos_win: Arc<Vec<f64>>,
    /// [n_bins x n_fft], -sin basis premultiplied by the Hann window.
    sin_win: Arc<Vec<f64>>,
    /// [n_mels x n_bins] triangular filters.
    fbank: Arc<Vec<f64>>,
}

impl MelTransform {
    pub fn new(cfg: &MelConfig, sample_rate: u32) -> Result<Self, MelError> {
        let nyquist = sample_rate as f64 / 2.0;
        if cfg.n_fft == 0 || cfg.hop == 0 {
            return Err(MelError::BadConfig("n_fft and hop must be positive".into()));
        }
        if cfg.hop > cfg.n_fft {
            return Err(MelError::BadConfig(format!("hop {} > n_fft {}", cfg.hop, cfg.n_fft)));
        }
        if cfg.n_mels == 0 {
            return Err(MelError::BadConfig("n_mels must be >= 1".into()));
        }
        if !(cfg.f_min >= 0.0 && cfg.f_min < cfg.f_max && cfg.f_max <= nyquist) {
            return Err(MelError::BadConfig(format!(
                "need 0 <= f_min < f_max <= {} Hz, got f_min {} f_max {}",
                nyquist, cfg.f_min, cfg.f_max
            )));
        }
        if !(cfg.log_floor > 0.0) {
            return Err(MelError::BadConfig("log_floor must be positive".into()));
        }

        let n_fft = cfg.n_fft;
        let n_bins = n_fft / 2 + 1;
        // Periodic Hann window.
        let window: Vec<f64> = (0..n_fft)
            .map(|n| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / n_fft as f64).cos()))
            .collect();
        let mut cos_win = vec![0.0; n_bins * n_fft];
        let mut sin_win = vec![0.0; n_bins * n_fft];
        for b in 0..n_bins {
            for n in 0..n_fft {
                let phase = 2.0 * std::f64::consts::PI * b as f64 * n as f64 / n_fft as f64;
                cos_win[b * n_fft + n] = phase.cos() * window[n];
                sin_win[b * n_fft + n] = -phase.sin() * window[n];
            }
        }

        // Triangular filters on the mel scale, edge bands flattened outward.
        let m_lo = hz_to_mel(cfg.f_min);
        let m_hi = hz_to_mel(cfg.f_max);
        let n_pts = cfg.n_mels + 2;
        let pts: Vec<f64> = (0..n_pts)
            .map(|i| m_lo + (m_hi - m_lo) * i as f64 / (n_pts - 1) as f64)
            .collect();
        let bin_hz = sample_rate as f64 / n_fft as f64;
        let mut fbank = vec![0.0; cfg.n_mels * n_bins];
        for band in 0..cfg.n_mels {
            let left = pts[band];
            let center = pts[band + 1];
            let right = pts[band + 2];
            let row = &mut fbank[band * n_bins..(band + 1) * n_bins];
            for (k, w) in row.iter_mut().enumerate() {
                let m = hz_to_mel(k as f64 * bin_hz);
                if m < left || m > right {
                    continue;
                }
                let rising = if band == 0 && m <= center {
                    1.0
                } else {
                    (m - left) / (center - left)
                };
                let falling = if band == cfg.n_mels - 1 && m >= center {
                    1.0
                } else {
                    (right - m) / (right - center)
                };
                *w = rising.min(falling).max(0.0);
            }
            if row.iter().sum::<f64>() <= 0.0 {
                return Err(MelError::EmptyBand { band, n_fft, n_mels: cfg.n_mels });
            }
        }

        Ok(MelTransform {
            cfg: cfg.clone(),
            sample_rate,
            n_bins,
            cos_win: Arc::new(cos_win),
            sin_win: Arc::new(sin_win),
            fbank: Arc::new(fbank),
        })
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn filterbank(&self) -> &[f64] {
        &self.fbank
    }

    /// Center frequency (Hz) of a mel band.
    pub fn band_center_hz(&self, band: usize) -> f64 {
        let m_lo = hz_to_mel(self.cfg.f_min);
        let m_hi = hz_to_mel(self.cfg.f_max);
        let n_pts = self.cfg.n_mels + 2;
        let m = m_lo + (m_hi - m_lo) * (band + 1) as f64 / (n_pts - 1) as f64;
        700.0 * (10f64.powf(m / 2595.0) - 1.0)
    }

    /// log(mel power + floor) of a rank-1 signal: [n_mels x frames].
    pub fn log_mel(&self, g: &mut Graph, signal: TensorId) -> Result<TensorId, MelError> {
        let t = match g.shape(signal) {
            [t] => *t,
            s => return Err(MelError::BadConfig(format!("expected rank-1 signal, got shape {:?}", s))),
        };
        if t < self.cfg.n_fft {
            return Err(MelError::SignalTooShort { t, n_fft: self.cfg.n_fft });
        }
        let frames = g.frame(signal, self.cfg.n_fft, self.cfg.hop)?;
        let cos_m = g.insert_shared(self.cos_win.clone(), vec![self.n_bins, self.cfg.n_fft])?;
        let sin_m = g.insert_shared(self.sin_win.clone(), vec![self.n_bins, self.cfg.n_fft])?;
        let re = g.matmul(cos_m, frames)?;
        let im = g.matmul(sin_m, frames)?;
        let re2 = g.mul(re, re)?;
        let im2 = g.mul(im, im)?;
        let power = g.add(re2, im2)?;
        let fb = g.insert_shared(self.fbank.clone(), vec![self.cfg.n_mels, self.n_bins])?;
        let mel_power = g.matmul(fb, power)?;
        let shifted = g.add_scalar(mel_power, self.cfg.log_floor)?;
        Ok(g.log(shifted)?)
    }
}

/// Mean absolute log-mel difference, averaged over the given scales.
pub fn multiscale_mel_loss(
    g: &mut Graph,
    a: TensorId,
    b: TensorId,
    scales: &[MelTransform],
) -> Result<TensorId, MelError> {
    let (ta, tb) = (g.numel(a), g.numel(b));
    if ta != tb {
        return Err(MelError::LengthMismatch(ta, tb));
    }
    if scales.is_empty() {
        return Err(MelError::BadConfig("no scales given".into()));
    }
    let mut acc: Option<TensorId> = None;
    for tr in scales {
        let la = tr.log_mel(g, a)?;
        let lb = tr.log_mel(g, b)?;
        let diff = g.sub(la, lb)?;
        let mag = g.abs(diff)?;
        let m = g.mean(mag)?;
        acc = Some(match acc {
            None => m,
            Some(prev) => g.add(prev, m)?,
        });
    }
    Ok(g.scale(acc.unwrap(), 1.0 / scales.len() as f64)?)
}
