//! Model evaluation against the oracle on a grid of (clip, setting) pairs.
//!
//! Predictions are quantized to float-32 (the persistence format) before
//! metrics are computed, so a row recomputed later from the saved prediction
//! WAV reproduces the reported numbers exactly.

use std::path::Path;

use ampforge_core::amp::{synth_amp_process, AmpError, SynthAmpConfig};
use ampforge_core::audio::{write_wav, AudioError, AudioSignal, WavEncoding};
use ampforge_core::graph::Graph;
use ampforge_core::knob::KnobVector;
use ampforge_core::mel::{multiscale_mel_loss, MelError, MelTransform};
use ampforge_core::models::{Model, ModelError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation needs a non-empty test set")]
    EmptyTestSet,
    #[error(transparent)]
    Amp(#[from] AmpError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mel(#[from] MelError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Anything evaluable on (clip, knobs) pairs.
pub trait EvalModel {
    fn run(&self, clip: &AudioSignal, knobs: &KnobVector) -> Result<Vec<f64>, EvalError>;
}

impl EvalModel for Model {
    fn run(&self, clip: &AudioSignal, knobs: &KnobVector) -> Result<Vec<f64>, EvalError> {
        Ok(self.predict(clip.samples(), knobs.values())?)
    }
}

/// The oracle itself, wrapped as a model; useful as a sanity baseline.
pub struct OraclePassthrough<'a>(pub &'a SynthAmpConfig);

impl EvalModel for OraclePassthrough<'_> {
    fn run(&self, clip: &AudioSignal, knobs: &KnobVector) -> Result<Vec<f64>, EvalError> {
        Ok(synth_amp_process(clip, knobs, self.0)?.into_samples())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRow {
    pub clip: usize,
    pub setting: usize,
    pub mse: f64,
    pub mel: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    pub dataset_size: usize,
    pub seed: u64,
    pub rows: Vec<EvalRow>,
    pub mean_mse: f64,
    pub median_mse: f64,
    pub mean_mel: f64,
    pub median_mel: f64,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Round through f32 the way the WAV writer does.
pub fn quantize_f32(samples: &[f64]) -> Vec<f64> {
    samples.iter().map(|v| *v as f32 as f64).collect()
}

pub fn waveform_mse(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

pub fn mel_metric(a: &[f64], b: &[f64], scales: &[MelTransform]) -> Result<f64, MelError> {
    let mut g = Graph::new();
    let ta = g.leaf(a.to_vec(), vec![a.len()], false)?;
    let tb = g.leaf(b.to_vec(), vec![b.len()], false)?;
    let loss = multiscale_mel_loss(&mut g, ta, tb, scales)?;
    Ok(g.scalar_value(loss))
}

/// Evaluate on every (clip, setting) pair, labeling ground truth with the
/// synthetic amp. Prediction WAVs are saved under `save_predictions` when
/// given, named `pred_c<clip>_s<setting>.wav`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &dyn EvalModel,
    model_id: &str,
    dataset_size: usize,
    seed: u64,
    clips: &[AudioSignal],
    settings: &[KnobVector],
    amp: &SynthAmpConfig,
    scales: &[MelTransform],
    save_predictions: Option<&Path>,
) -> Result<EvalReport, EvalError> {
    if clips.is_empty() || settings.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    if let Some(dir) = save_predictions {
        std::fs::create_dir_all(dir).map_err(|source| EvalError::Io { path: dir.display().to_string(), source })?;
    }
    let mut rows = Vec::with_capacity(clips.len() * settings.len());
    for (ci, clip) in clips.iter().enumerate() {
        for (si, kv) in settings.iter().enumerate() {
            let truth = synth_amp_process(clip, kv, amp)?;
            let pred_q = quantize_f32(&model.run(clip, kv)?);
            if let Some(dir) = save_predictions {
                let sig = AudioSignal::new(pred_q.clone(), clip.sample_rate())?;
                write_wav(&dir.join(format!("pred_c{ci}_s{si}.wav")), &sig, WavEncoding::Float32)?;
            }
            let mse = waveform_mse(&pred_q, truth.samples());
            let mel = mel_metric(&pred_q, truth.samples(), scales)?;
            rows.push(EvalRow { clip: ci, setting: si, mse, mel });
        }
    }
    let mut mses: Vec<f64> = rows.iter().map(|r| r.mse).collect();
    let mut mels: Vec<f64> = rows.iter().map(|r| r.mel).collect();
    let mean_mse = mses.iter().sum::<f64>() / mses.len() as f64;
    let mean_mel = mels.iter().sum::<f64>() / mels.len() as f64;
    Ok(EvalReport {
        model_id: model_id.to_string(),
        dataset_size,
        seed,
        mean_mse,
        median_mse: median(&mut mses),
        mean_mel,
        median_mel: median(&mut mels),
        rows,
    })
}

pub fn write_eval_csv(path: &Path, report: &EvalReport) -> Result<(), EvalError> {
    use std::io::Write;
    let mut out = String::new();
    out.push_str(&format!(
        "# model_id={} dataset_size={} seed={}\n",
        report.model_id, report.dataset_size, report.seed
    ));
    out.push_str("clip,setting,mse,mel\n");
    for r in &report.rows {
        out.push_str(&format!("{},{},{},{}\n", r.clip, r.setting, r.mse, r.mel));
    }
    out.push_str(&format!(
        "# mean_mse={} median_mse={} mean_mel={} median_mel={}\n",
        report.mean_mse, report.median_mse, report.mean_mel, report.median_mel
    ));
    let mut f = std::fs::File::create(path).map_err(|source| EvalError::Io { path: path.display().to_string(), source })?;
    f.write_all(out.as_bytes()).map_err(|source| EvalError::Io { path: path.display().to_string(), source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ampforge_core::mel::MelConfig;

    #[test]
    fn oracle_passthrough_scores_zero() {
        let sr = 16_000;
        let amp = SynthAmpConfig::default_at(sr);
        let clips = vec![crate::signals::test_clip(0.4, sr, 3)];
        let settings = vec![
            KnobVector::labeled(vec![0.3, 0.5, 0.6, 0.4, 0.7, 0.5]).unwrap(),
            KnobVector::labeled(vec![0.9, 0.1, 0.2, 0.8, 0.5, 0.6]).unwrap(),
        ];
        let scales = vec![MelTransform::new(
            &MelConfig { n_fft: 256, hop: 64, n_mels: 20, f_min: 0.0, f_max: 8000.0, log_floor: 1e-5 },
            sr,
        )
        .unwrap()];
        let report = evaluate(
            &OraclePassthrough(&amp),
            "oracle",
            0,
            0,
            &clips,
            &settings,
            &amp,
            &scales,
            None,
        )
        .unwrap();
        // The passthrough output still goes through f32 quantization, so MSE
        // is bounded by quantization noise rather than exactly zero.
        assert!(report.mean_mse < 1e-12, "mse {}", report.mean_mse);
        assert!(report.mean_mel < 1e-4, "mel {}", report.mean_mel);
    }

    #[test]
    fn empty_test_set_rejected() {
        let amp = SynthAmpConfig::default_at(16_000);
        let err = evaluate(&OraclePassthrough(&amp), "x", 0, 0, &[], &[], &amp, &[], None);
        assert!(matches!(err, Err(EvalError::EmptyTestSet)));
    }

    #[test]
    fn metrics_reproducible_from_saved_predictions() {
        let sr = 16_000;
        let amp = SynthAmpConfig::default_at(sr);
        let dir = tempfile::tempdir().unwrap();
        let clips = vec![crate::signals::test_clip(0.3, sr, 5)];
        let settings = vec![KnobVector::labeled(vec![0.7, 0.4, 0.5, 0.6, 0.8, 0.3]).unwrap()];
        let scales = vec![MelTransform::new(
            &MelConfig { n_fft: 128, hop: 32, n_mels: 10, f_min: 0.0, f_max: 8000.0, log_floor: 1e-5 },
            sr,
        )
        .unwrap()];
        let report = evaluate(
            &OraclePassthrough(&amp),
            "oracle",
            0,
            0,
            &clips,
            &settings,
            &amp,
            &scales,
            Some(dir.path()),
        )
        .unwrap();
        // Recompute both metrics from the saved WAV + the oracle alone.
        let pred = ampforge_core::audio::read_wav(&dir.path().join("pred_c0_s0.wav")).unwrap();
        let truth = synth_amp_process(&clips[0], &settings[0], &amp).unwrap();
        let mse = waveform_mse(pred.samples(), truth.samples());
        let mel = mel_metric(pred.samples(), truth.samples(), &scales).unwrap();
        assert!((mse - report.rows[0].mse).abs() <= 1e-12 * report.rows[0].mse.abs().max(1e-300));
        assert!((mel - report.rows[0].mel).abs() <= 1e-12 * report.rows[0].mel.abs().max(1e-300));
    }
}
