//! Baseline knob-setting samplers and the beta moment fit.

use ampforge_core::knob::KnobVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("beta parameters must be positive, got alpha={0}, beta={1}")]
    BadBetaParams(f64, f64),
    #[error("cannot fit a beta distribution to {0}")]
    DegenerateFit(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SettingsDist {
    Uniform,
    Beta { alpha: f64, beta: f64 },
}

/// Draw `n` settings with k components each. Deterministic for a fixed seed.
pub fn sample_settings(n: usize, k: usize, dist: SettingsDist, seed: u64) -> Result<Vec<KnobVector>, SamplingError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    match dist {
        SettingsDist::Uniform => {
            for _ in 0..n {
                let vals: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..=1.0)).collect();
                out.push(KnobVector::labeled(vals).expect("uniform draw in range"));
            }
        }
        SettingsDist::Beta { alpha, beta } => {
            if !(alpha > 0.0 && beta > 0.0) {
                return Err(SamplingError::BadBetaParams(alpha, beta));
            }
            let d = Beta::new(alpha, beta).map_err(|_| SamplingError::BadBetaParams(alpha, beta))?;
            for _ in 0..n {
                let vals: Vec<f64> = (0..k).map(|_| d.sample(&mut rng).clamp(0.0, 1.0)).collect();
                out.push(KnobVector::labeled(vals).expect("beta draw in range"));
            }
        }
    }
    Ok(out)
}

/// Method-of-moments beta fit on values in [0, 1]. Values are clipped to
/// (1e-4, 1 - 1e-4) first; a zero-variance sample is rejected.
pub fn fit_beta(values: &[f64]) -> Result<(f64, f64), SamplingError> {
    if values.len() < 2 {
        return Err(SamplingError::DegenerateFit("fewer than 2 values"));
    }
    const EPS: f64 = 1e-4;
    let clipped: Vec<f64> = values.iter().map(|v| v.clamp(EPS, 1.0 - EPS)).collect();
    let n = clipped.len() as f64;
    let mean = clipped.iter().sum::<f64>() / n;
    let var = clipped.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var <= 0.0 {
        return Err(SamplingError::DegenerateFit("zero variance"));
    }
    let common = mean * (1.0 - mean) / var - 1.0;
    let alpha = mean * common;
    let beta = (1.0 - mean) * common;
    if !(alpha > 0.0 && beta > 0.0) {
        return Err(SamplingError::DegenerateFit("moments outside the beta family"));
    }
    Ok((alpha, beta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beta_half_half_mean_near_half() {
        let draws = sample_settings(10_000, 1, SettingsDist::Beta { alpha: 0.5, beta: 0.5 }, 42).unwrap();
        let mean: f64 = draws.iter().map(|kv| kv.get(0)).sum::<f64>() / draws.len() as f64;
        assert!((mean - 0.5).abs() < 0.02, "mean {mean}");
        // Arcsine shape: mass piles near the edges.
        let near_edges = draws.iter().filter(|kv| kv.get(0) < 0.1 || kv.get(0) > 0.9).count();
        assert!(near_edges as f64 / draws.len() as f64 > 0.3);
    }

    #[test]
    fn uniform_covers_the_range() {
        let draws = sample_settings(10_000, 1, SettingsDist::Uniform, 7).unwrap();
        let min = draws.iter().map(|kv| kv.get(0)).fold(f64::INFINITY, f64::min);
        let max = draws.iter().map(|kv| kv.get(0)).fold(0.0f64, f64::max);
        assert!(min < 0.05 && max > 0.95, "min {min} max {max}");
    }

    #[test]
    fn fixed_seed_identical_sequence() {
        let a = sample_settings(32, 6, SettingsDist::Uniform, 11).unwrap();
        let b = sample_settings(32, 6, SettingsDist::Uniform, 11).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.values(), y.values());
        }
    }

    #[test]
    fn bad_beta_params_rejected() {
        assert!(sample_settings(4, 2, SettingsDist::Beta { alpha: 0.0, beta: 1.0 }, 1).is_err());
        assert!(sample_settings(4, 2, SettingsDist::Beta { alpha: 1.0, beta: -2.0 }, 1).is_err());
    }

    #[test]
    fn fit_bimodal_sample_gives_tiny_symmetric_params() {
        let mut vals = vec![0.01; 500];
        vals.extend(vec![0.99; 500]);
        let (a, b) = fit_beta(&vals).unwrap();
        // Moments: mean 0.5, var 0.2401 -> alpha = beta = 0.5 * (0.25/0.2401 - 1).
        let want = 0.5 * (0.25 / 0.2401 - 1.0);
        assert!((a - want).abs() < 1e-12 && (b - want).abs() < 1e-12, "{a} {b} vs {want}");
        assert!(a < 0.1);
    }

    #[test]
    fn fit_uniform_sample_near_one_one() {
        let draws = sample_settings(10_000, 1, SettingsDist::Uniform, 3).unwrap();
        let vals: Vec<f64> = draws.iter().map(|kv| kv.get(0)).collect();
        let (a, b) = fit_beta(&vals).unwrap();
        assert!((a - 1.0).abs() < 0.1, "alpha {a}");
        assert!((b - 1.0).abs() < 0.1, "beta {b}");
    }

    #[test]
    fn fit_zero_variance_rejected() {
        assert!(fit_beta(&[0.4; 100]).is_err());
    }
}
