//! Synthetic test/train audio: noise bursts, a log sine sweep, and
//! Karplus-Strong plucked tones. Stands in for recorded DI guitar at desk
//! scale; everything is seeded and deterministic.

use ampforge_core::audio::AudioSignal;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Karplus-Strong pluck: noise-filled delay line with averaging feedback.
fn pluck(rng: &mut ChaCha8Rng, sr: u32, f0: f64, seconds: f64, amp: f64) -> Vec<f64> {
    let n = (seconds * sr as f64) as usize;
    let period = (sr as f64 / f0).round().max(2.0) as usize;
    let mut buf: Vec<f64> = (0..period).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let decay = 0.996;
    let mut out = Vec::with_capacity(n);
    let mut idx = 0usize;
    for _ in 0..n {
        let next = (idx + 1) % period;
        let v = buf[idx];
        buf[idx] = decay * 0.5 * (buf[idx] + buf[next]);
        out.push(amp * v);
        idx = next;
    }
    out
}

/// Pentatonic-ish pitch table used for pseudo-guitar content.
const PITCHES: [f64; 10] = [82.41, 98.0, 110.0, 123.47, 146.83, 164.81, 196.0, 220.0, 246.94, 293.66];

fn add_into(dst: &mut [f64], start: usize, src: &[f64]) {
    for (i, v) in src.iter().enumerate() {
        if start + i >= dst.len() {
            break;
        }
        dst[start + i] += v;
    }
}

fn normalize_peak(samples: &mut [f64], peak: f64) {
    let max = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max > 0.0 {
        let k = peak / max;
        for v in samples.iter_mut() {
            *v *= k;
        }
    }
}

/// The fixed training input: one third seeded noise bursts, one third a
/// logarithmic sine sweep, one third overlapping plucked tones.
pub fn composite_signal(seconds: f64, sample_rate: u32, seed: u64) -> AudioSignal {
    let sr = sample_rate;
    let n = (seconds * sr as f64) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0.0; n];
    let third = n / 3;

    // Noise bursts with a raised-cosine envelope.
    let burst_len = sr as usize / 8;
    let mut pos = 0usize;
    while pos + burst_len < third {
        let amp = rng.gen_range(0.2..0.9);
        for i in 0..burst_len {
            let env = 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / burst_len as f64).cos());
            out[pos + i] += amp * env * rng.gen_range(-1.0..1.0);
        }
        pos += burst_len + rng.gen_range(0..burst_len / 2);
    }

    // Logarithmic sweep 40 Hz -> 6 kHz across the middle third.
    let (f0, f1) = (40.0, 6000.0);
    let sweep_len = third;
    let k = (f1 / f0).ln();
    for i in 0..sweep_len {
        let t = i as f64 / sweep_len as f64;
        let phase = 2.0 * std::f64::consts::PI * f0 * (sweep_len as f64 / sr as f64) * ((k * t).exp() - 1.0) / k;
        out[third + i] += 0.55 * phase.sin();
    }

    // Plucked tones over the final third.
    let mut start = 2 * third;
    while start < n.saturating_sub(sr as usize / 4) {
        let f = PITCHES[rng.gen_range(0..PITCHES.len())];
        let dur = rng.gen_range(0.2..0.5);
        let amp = rng.gen_range(0.3..0.8);
        let tone = pluck(&mut rng, sr, f, dur, amp);
        add_into(&mut out, start, &tone);
        start += rng.gen_range(sr as usize / 8..sr as usize / 3);
    }

    normalize_peak(&mut out, 0.8);
    AudioSignal::new(out, sr).expect("non-empty composite")
}

/// A guitar-like held-test clip: plucked notes and two-note dyads.
pub fn test_clip(seconds: f64, sample_rate: u32, seed: u64) -> AudioSignal {
    let sr = sample_rate;
    let n = (seconds * sr as f64) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0.0; n];
    let mut start = 0usize;
    while start < n.saturating_sub(sr as usize / 8) {
        let root = PITCHES[rng.gen_range(0..PITCHES.len())];
        let dur = rng.gen_range(0.25..0.6);
        let amp = rng.gen_range(0.35..0.75);
        let tone = pluck(&mut rng, sr, root, dur, amp);
        add_into(&mut out, start, &tone);
        if rng.gen_bool(0.4) {
            let fifth = pluck(&mut rng, sr, root * 1.5, dur, amp * 0.7);
            add_into(&mut out, start, &fifth);
        }
        start += rng.gen_range(sr as usize / 6..sr as usize / 2);
    }
    normalize_peak(&mut out, 0.75);
    AudioSignal::new(out, sr).expect("non-empty clip")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_sized() {
        let a = composite_signal(2.0, 16_000, 9);
        let b = composite_signal(2.0, 16_000, 9);
        assert_eq!(a.samples(), b.samples());
        assert_eq!(a.len(), 32_000);
        let c = composite_signal(2.0, 16_000, 10);
        assert_ne!(a.samples(), c.samples());
        let peak = a.samples().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(peak > 0.7 && peak <= 0.8001);
    }

    #[test]
    fn clips_distinct_by_seed() {
        let a = test_clip(1.0, 16_000, 1);
        let b = test_clip(1.0, 16_000, 2);
        assert_ne!(a.samples(), b.samples());
        assert!(a.rms() > 0.01);
    }
}
