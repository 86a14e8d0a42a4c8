//! Ensemble-disagreement acquisition.
//!
//! The objective D(x, g) sums per-element population variances of the member
//! outputs across the ensemble, in the waveform domain and optionally the
//! log-mel domain, each scaled by 1/M and a caller weight. D is differentiable
//! with respect to the knob vector, so new settings are proposed by projected
//! Adam ascent on g inside [0, 1]^k, restarted from seeded random points, with
//! the distinct optima kept.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, GraphError, TensorId};
use crate::knob::KnobVector;
use crate::mel::{MelError, MelTransform};
use crate::models::{Model, ModelError};

#[derive(Debug, Error)]
pub enum AcquireError {
    #[error("disagreement needs at least 2 ensemble members, got {0}")]
    TooFewMembers(usize),
    #[error("disagreement weights must not both be zero")]
    ZeroWeights,
    #[error("mel-domain weight is positive but no mel transform was supplied")]
    MissingMel,
    #[error("invalid acquire config: {0}")]
    BadConfig(String),
    #[error("excerpt {start}..{end} outside signal of length {len}")]
    BadExcerpt { start: usize, end: usize, len: usize },
    #[error("acquisition failed: every restart aborted ({0} failures)")]
    AllRestartsFailed(usize),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Mel(#[from] MelError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Anything that can predict an output signal on a graph, conditioned on knobs.
pub trait Predictor: Sync {
    fn forward(&self, g: &mut Graph, x: TensorId, knobs: TensorId) -> Result<TensorId, AcquireError>;
}

impl Predictor for Model {
    fn forward(&self, g: &mut Graph, x: TensorId, knobs: TensorId) -> Result<TensorId, AcquireError> {
        let bound = self.bind(g, false);
        Ok(self.forward_bound(g, &bound, x, knobs)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisagreementWeights {
    pub w_waveform: f64,
    pub w_mel: f64,
}

impl DisagreementWeights {
    pub fn validate(&self) -> Result<(), AcquireError> {
        if self.w_waveform < 0.0 || self.w_mel < 0.0 {
            return Err(AcquireError::BadConfig("disagreement weights must be nonnegative".into()));
        }
        if self.w_waveform == 0.0 && self.w_mel == 0.0 {
            return Err(AcquireError::ZeroWeights);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquireConfig {
    pub restarts: usize,
    pub steps: usize,
    pub step_size: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Window of x used when evaluating D: (start, length).
    pub excerpt_start: usize,
    pub excerpt_len: usize,
    pub dedupe_threshold: f64,
    pub max_per_round: Option<usize>,
    pub seed: u64,
}

impl AcquireConfig {
    pub fn validate(&self, mel: Option<&MelTransform>) -> Result<(), AcquireError> {
        if self.restarts == 0 {
            return Err(AcquireError::BadConfig("restarts must be >= 1".into()));
        }
        if self.steps == 0 {
            return Err(AcquireError::BadConfig("steps must be >= 1".into()));
        }
        if !(self.step_size > 0.0) {
            return Err(AcquireError::BadConfig("step_size must be positive".into()));
        }
        if !(self.dedupe_threshold > 0.0 && self.dedupe_threshold < 1.0) {
            return Err(AcquireError::BadConfig(format!(
                "dedupe_threshold must be in (0, 1), got {}",
                self.dedupe_threshold
            )));
        }
        if let Some(m) = mel {
            if self.excerpt_len < m.cfg.n_fft {
                return Err(AcquireError::BadConfig(format!(
                    "excerpt length {} shorter than mel n_fft {}",
                    self.excerpt_len, m.cfg.n_fft
                )));
            }
        }
        Ok(())
    }
}

/// Build D on the graph: for each enabled domain, (w / M^2) * sum_i ||f_i - mean||^2,
/// which equals w * (1/M) * trace of the population covariance.
pub fn disagreement_graph(
    g: &mut Graph,
    members: &[&dyn Predictor],
    x: TensorId,
    knobs: TensorId,
    weights: &DisagreementWeights,
    mel: Option<&MelTransform>,
) -> Result<TensorId, AcquireError> {
    weights.validate()?;
    let m = members.len();
    if m < 2 {
        return Err(AcquireError::TooFewMembers(m));
    }
    if weights.w_mel > 0.0 && mel.is_none() {
        return Err(AcquireError::MissingMel);
    }

    let outputs: Vec<TensorId> = members
        .iter()
        .map(|p| p.forward(g, x, knobs))
        .collect::<Result<_, _>>()?;

    let mut total: Option<TensorId> = None;
    if weights.w_waveform > 0.0 {
        let term = variance_trace(g, &outputs, weights.w_waveform)?;
        total = Some(term);
    }
    if weights.w_mel > 0.0 {
        let tr = mel.expect("checked above");
        let mels: Vec<TensorId> = outputs
            .iter()
            .map(|y| tr.log_mel(g, *y))
            .collect::<Result<_, _>>()?;
        let term = variance_trace(g, &mels, weights.w_mel)?;
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    Ok(total.expect("at least one domain enabled"))
}

/// (w / M^2) * sum_i ||t_i - mean||^2 over same-shape tensors.
fn variance_trace(g: &mut Graph, tensors: &[TensorId], w: f64) -> Result<TensorId, AcquireError> {
    let m = tensors.len();
    let mut acc = tensors[0];
    for t in &tensors[1..] {
        acc = g.add(acc, *t)?;
    }
    let mean = g.scale(acc, 1.0 / m as f64)?;
    let mut sum_sq: Option<TensorId> = None;
    for t in tensors {
        let d = g.sub(*t, mean)?;
        let sq = g.mul(d, d)?;
        let s = g.sum(sq)?;
        sum_sq = Some(match sum_sq {
            None => s,
            Some(a) => g.add(a, s)?,
        });
    }
    Ok(g.scale(sum_sq.expect("non-empty"), w / (m * m) as f64)?)
}

/// Evaluate D (value only) at a knob point.
pub fn disagreement(
    members: &[&dyn Predictor],
    x: &[f64],
    knobs: &KnobVector,
    weights: &DisagreementWeights,
    mel: Option<&MelTransform>,
) -> Result<f64, AcquireError> {
    let mut g = Graph::new();
    let xt = g.leaf(x.to_vec(), vec![x.len()], false)?;
    let kt = g.leaf(knobs.values().to_vec(), vec![knobs.k()], false)?;
    let d = disagreement_graph(&mut g, members, xt, kt, weights, mel)?;
    Ok(g.scalar_value(d))
}

/// One gradient-ascent run from a fixed starting point.
#[derive(Debug, Clone)]
pub struct AscentResult {
    pub knobs: KnobVector,
    pub disagreement: f64,
    /// (point, D) per iterate, starting point included.
    pub trajectory: Vec<(Vec<f64>, f64)>,
    pub iterations: usize,
}

/// Projected Adam ascent on g in [0,1]^k; ensemble parameters stay frozen.
/// Returns the best iterate seen, so the result never falls below D(g0).
pub fn maximize_disagreement(
    members: &[&dyn Predictor],
    x: &[f64],
    g0: &KnobVector,
    cfg: &AcquireConfig,
    weights: &DisagreementWeights,
    mel: Option<&MelTransform>,
) -> Result<AscentResult, AcquireError> {
    cfg.validate(mel)?;
    weights.validate()?;
    let k = g0.k();
    let mut point = g0.clone();
    let mut m_state = vec![0.0; k];
    let mut v_state = vec![0.0; k];
    let mut trajectory = Vec::with_capacity(cfg.steps + 1);
    let mut best: Option<(f64, KnobVector)> = None;

    for step in 0..=cfg.steps {
        let mut g = Graph::new();
        let xt = g.leaf(x.to_vec(), vec![x.len()], false)?;
        let kt = g.leaf(point.values().to_vec(), vec![k], true)?;
        let d = disagreement_graph(&mut g, members, xt, kt, weights, mel)?;
        let d_val = g.scalar_value(d);
        if !d_val.is_finite() {
            return Err(AcquireError::BadConfig(format!("non-finite D at step {step}")));
        }
        trajectory.push((point.values().to_vec(), d_val));
        if best.as_ref().map_or(true, |(b, _)| d_val > *b) {
            best = Some((d_val, point.clone()));
        }
        if step == cfg.steps {
            break;
        }
        g.backward(d)?;
        let grad = g.grad(kt).expect("knob gradient");
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(AcquireError::BadConfig(format!("non-finite knob gradient at step {step}")));
        }
        let t = (step + 1) as i32;
        let bc1 = 1.0 - cfg.adam_beta1.powi(t);
        let bc2 = 1.0 - cfg.adam_beta2.powi(t);
        let mut next = point.values().to_vec();
        for i in 0..k {
            m_state[i] = cfg.adam_beta1 * m_state[i] + (1.0 - cfg.adam_beta1) * grad[i];
            v_state[i] = cfg.adam_beta2 * v_state[i] + (1.0 - cfg.adam_beta2) * grad[i] * grad[i];
            // Ascent, then projection onto the box.
            next[i] += cfg.step_size * (m_state[i] / bc1) / ((v_state[i] / bc2).sqrt() + cfg.adam_eps);
        }
        point.set_clamped(&next);
    }

    let (d_star, knobs) = best.expect("at least one iterate");
    Ok(AscentResult { knobs, disagreement: d_star, trajectory, iterations: cfg.steps })
}

/// Outcome of one restart within a batch proposal; `error` is set when the
/// ascent aborted.
#[derive(Debug, Clone)]
pub struct RestartLog {
    pub restart: usize,
    pub iterations: usize,
    pub d_star: f64,
    pub knobs: Vec<f64>,
    pub accepted: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ProposeResult {
    pub accepted: Vec<KnobVector>,
    pub restarts: Vec<RestartLog>,
}

/// Restarted ascent from seeded uniform starting points, deduplicated to the
/// distinct optima (descending D), optionally truncated to `max_per_round`.
pub fn propose_batch(
    members: &[&dyn Predictor],
    x: &[f64],
    k: usize,
    cfg: &AcquireConfig,
    weights: &DisagreementWeights,
    mel: Option<&MelTransform>,
) -> Result<ProposeResult, AcquireError> {
    cfg.validate(mel)?;
    weights.validate()?;
    if x.len() < cfg.excerpt_start + cfg.excerpt_len {
        return Err(AcquireError::BadExcerpt {
            start: cfg.excerpt_start,
            end: cfg.excerpt_start + cfg.excerpt_len,
            len: x.len(),
        });
    }
    let excerpt = &x[cfg.excerpt_start..cfg.excerpt_start + cfg.excerpt_len];

    let runs: Vec<(usize, Result<AscentResult, AcquireError>)> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(r as u64));
            let start: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..=1.0)).collect();
            let g0 = KnobVector::labeled(start).expect("uniform start in range");
            (r, maximize_disagreement(members, excerpt, &g0, cfg, weights, mel))
        })
        .collect();

    let mut candidates: Vec<(usize, AscentResult)> = Vec::new();
    let mut logs: Vec<RestartLog> = Vec::new();
    let mut failures = 0usize;
    for (r, run) in runs {
        match run {
            Ok(res) => {
                logs.push(RestartLog {
                    restart: r,
                    iterations: res.iterations,
                    d_star: res.disagreement,
                    knobs: res.knobs.values().to_vec(),
                    accepted: false,
                    error: None,
                });
                candidates.push((r, res));
            }
            Err(e) => {
                failures += 1;
                logs.push(RestartLog {
                    restart: r,
                    iterations: 0,
                    d_star: f64::NAN,
                    knobs: vec![],
                    accepted: false,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    if candidates.is_empty() {
        return Err(AcquireError::AllRestartsFailed(failures));
    }

    let scored: Vec<(KnobVector, f64, usize)> = candidates
        .iter()
        .map(|(r, res)| (res.knobs.clone(), res.disagreement, *r))
        .collect();
    let mut accepted = dedupe_optima_indexed(&scored, cfg.dedupe_threshold);
    if let Some(cap) = cfg.max_per_round {
        accepted.truncate(cap);
    }
    for (kv, _, r) in &accepted {
        let _ = kv;
        if let Some(log) = logs.iter_mut().find(|l| l.restart == *r) {
            log.accepted = true;
        }
    }
    Ok(ProposeResult {
        accepted: accepted.into_iter().map(|(kv, _, _)| kv).collect(),
        restarts: logs,
    })
}

/// Greedy leader clustering: sort by descending D (ties by input order),
/// accept a candidate iff its Euclidean distance to every already-accepted
/// vector is at least `threshold`.
pub fn dedupe_optima(candidates: &[(KnobVector, f64)], threshold: f64) -> Vec<KnobVector> {
    let indexed: Vec<(KnobVector, f64, usize)> = candidates
        .iter()
        .enumerate()
        .map(|(i, (kv, d))| (kv.clone(), *d, i))
        .collect();
    dedupe_optima_indexed(&indexed, threshold)
        .into_iter()
        .map(|(kv, _, _)| kv)
        .collect()
}

fn dedupe_optima_indexed(
    candidates: &[(KnobVector, f64, usize)],
    threshold: f64,
) -> Vec<(KnobVector, f64, usize)> {
    let mut sorted: Vec<&(KnobVector, f64, usize)> = candidates.iter().collect();
    sorted.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.2.cmp(&b.2)));
    let mut accepted: Vec<(KnobVector, f64, usize)> = Vec::new();
    for cand in sorted {
        let far_enough = accepted
            .iter()
            .all(|(kv, _, _)| kv.euclidean_distance(&cand.0) >= threshold);
        if far_enough {
            accepted.push(cand.clone());
        }
    }
    accepted
}

/// Write the per-round acquisition log: restart id, iterations, final D*,
/// final g components, accepted flag.
pub fn write_acquisition_log(path: &std::path::Path, logs: &[RestartLog], k: usize) -> std::io::Result<()> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    let knob_cols: Vec<String> = (0..k).map(|i| format!("g{i}")).collect();
    writeln!(f, "restart,iterations,d_star,{},accepted,error", knob_cols.join(","))?;
    for log in logs {
        let knobs: Vec<String> = if log.knobs.is_empty() {
            vec![String::new(); k]
        } else {
            log.knobs.iter().map(|v| format!("{v}")).collect()
        };
        writeln!(
            f,
            "{},{},{},{},{},{}",
            log.restart,
            log.iterations,
            if log.d_star.is_nan() { String::new() } else { format!("{}", log.d_star) },
            knobs.join(","),
            log.accepted,
            log.error.as_deref().unwrap_or("")
        )?;
    }
    Ok(())
}


#[cfg(test)]
mod prop_tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]
        #[test]
        fn dedupe_accepted_set_is_pairwise_separated(
            raw in proptest::collection::vec((0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..=10.0), 0..24),
            threshold in 0.05f64..0.9,
        ) {
            let candidates: Vec<(KnobVector, f64)> = raw
                .iter()
                .map(|(a, b, d)| (KnobVector::labeled(vec![*a, *b]).unwrap(), *d))
                .collect();
            let out = dedupe_optima(&candidates, threshold);
            prop_assert!(out.len() <= candidates.len());
            for i in 0..out.len() {
                for j in (i + 1)..out.len() {
                    prop_assert!(out[i].euclidean_distance(&out[j]) >= threshold);
                }
            }
            // Greedy leader clustering keeps every candidate representable:
            // each input is within threshold of some accepted vector.
            for (kv, _) in &candidates {
                prop_assert!(out.iter().any(|a| a.euclidean_distance(kv) < threshold || a.values() == kv.values()));
            }
        }
    }
}
