//! The shared evaluation set: synthetic clips plus uniformly sampled test
//! settings, all derived from the experiment's root seed so every model in a
//! study is scored on identical data.

use std::path::Path;

use ampforge_core::audio::{write_wav, AudioSignal, WavEncoding};
use ampforge_core::knob::KnobVector;

use crate::config::ExperimentConfig;
use crate::eval::quantize_f32;
use crate::sampling::{sample_settings, SettingsDist};
use crate::seeds;
use crate::signals::test_clip;

/// Build the test clips and settings for a config. Clip samples are
/// quantized to f32 so in-memory evaluation matches WAVs persisted later.
pub fn build_test_set(cfg: &ExperimentConfig) -> (Vec<AudioSignal>, Vec<KnobVector>) {
    let clips: Vec<AudioSignal> = (0..cfg.test_clips)
        .map(|i| {
            let sig = test_clip(cfg.test_clip_seconds, cfg.sample_rate, seeds::test_clip_seed(cfg.seed, i as u32));
            AudioSignal::new(quantize_f32(sig.samples()), cfg.sample_rate).expect("clip stays valid")
        })
        .collect();
    let settings = sample_settings(
        cfg.test_settings,
        cfg.k(),
        SettingsDist::Uniform,
        seeds::test_settings_seed(cfg.seed),
    )
    .expect("uniform sampling cannot fail");
    (clips, settings)
}

/// Persist the test set (clip WAVs + settings JSON) for offline rechecks.
pub fn persist_test_set(
    dir: &Path,
    clips: &[AudioSignal],
    settings: &[KnobVector],
) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, c) in clips.iter().enumerate() {
        write_wav(&dir.join(format!("clip{i}.wav")), c, WavEncoding::Float32)
            .map_err(|e| std::io::Error::other(e.to_string()))?;
    }
    let vals: Vec<Vec<f64>> = settings.iter().map(|s| s.values().to_vec()).collect();
    std::fs::write(dir.join("settings.json"), serde_json::to_string_pretty(&vals).unwrap() + "\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_for_a_config() {
        let mut cfg = ExperimentConfig::desk_default(5);
        cfg.test_clips = 2;
        cfg.test_clip_seconds = 0.5;
        cfg.test_settings = 4;
        let (c1, s1) = build_test_set(&cfg);
        let (c2, s2) = build_test_set(&cfg);
        assert_eq!(c1[0].samples(), c2[0].samples());
        assert_eq!(s1[3].values(), s2[3].values());
        assert_ne!(c1[0].samples(), c1[1].samples());
    }
}
