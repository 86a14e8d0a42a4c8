//! Distribution report for actively acquired knob components.

use std::path::Path;

use thiserror::Error;

use crate::dataset::{DatasetManifest, Source};
use crate::sampling::fit_beta;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub const HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Clone)]
pub struct GHistogram {
    /// Counts per bin over [0, 1]; the last bin is closed on the right.
    pub counts: Vec<u64>,
    /// Flattened component values the histogram was built from.
    pub components: Vec<f64>,
    /// Method-of-moments beta fit, when the sample admits one.
    pub beta_fit: Option<(f64, f64)>,
}

impl GHistogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Fraction of components within `margin` of 0 or 1.
    pub fn extremal_fraction(&self, margin: f64) -> f64 {
        if self.components.is_empty() {
            return 0.0;
        }
        let near = self
            .components
            .iter()
            .filter(|v| **v <= margin || **v >= 1.0 - margin)
            .count();
        near as f64 / self.components.len() as f64
    }
}

/// Histogram of every component of every actively acquired knob vector.
pub fn g_component_histogram(manifest: &DatasetManifest) -> GHistogram {
    let mut components = Vec::new();
    for e in &manifest.entries {
        if e.source == Source::Active {
            components.extend_from_slice(&e.g);
        }
    }
    let mut counts = vec![0u64; HISTOGRAM_BINS];
    for v in &components {
        let bin = ((v * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        counts[bin] += 1;
    }
    let beta_fit = fit_beta(&components).ok();
    GHistogram { counts, components, beta_fit }
}

/// CSV: one row per bin. An empty dataset produces just the header.
pub fn write_histogram_csv(path: &Path, hist: &GHistogram) -> Result<(), ReportError> {
    use std::io::Write;
    let mut out = String::from("bin_lo,bin_hi,count\n");
    if !hist.components.is_empty() {
        for (i, c) in hist.counts.iter().enumerate() {
            let lo = i as f64 / HISTOGRAM_BINS as f64;
            let hi = (i + 1) as f64 / HISTOGRAM_BINS as f64;
            out.push_str(&format!("{lo},{hi},{c}\n"));
        }
        if let Some((a, b)) = hist.beta_fit {
            out.push_str(&format!("# beta_fit alpha={a} beta={b}\n"));
        }
    }
    let mut f = std::fs::File::create(path)
        .map_err(|source| ReportError::Io { path: path.display().to_string(), source })?;
    f.write_all(out.as_bytes())
        .map_err(|source| ReportError::Io { path: path.display().to_string(), source })
}
