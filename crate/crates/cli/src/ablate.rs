//! Sampling-strategy and architecture-combination studies.
//!
//! The strategy study collects the same data budget with (i) the active
//! loop, (ii) uniform random settings, (iii) beta(0.5, 0.5) settings, then
//! trains identical final models on each dataset and scores them on one
//! shared test set. The architecture study runs the active loop for each
//! (ensemble, final) combination and reports ensemble training speed next to
//! final-model quality.

use std::path::{Path, PathBuf};

use ampforge_core::amp::synth_amp_process;
use ampforge_core::audio::{write_wav, AudioSignal, WavEncoding};
use ampforge_core::knob::KnobVector;
use ampforge_core::mel::{MelTransform, MelError};
use ampforge_core::models::{load_model, save_model, Model};
use ampforge_core::train::train_model;
use serde::Serialize;

use crate::config::{ArchKind, ExperimentConfig, OracleKind};
use crate::dataset::{DatasetEntry, DatasetManifest, Source};
use crate::eval::{evaluate, EvalError, EvalReport};
use crate::experiment::{Driver, DriverError, RoundRecord, RunOutcome};
use crate::rundir::RunDir;
use crate::sampling::{sample_settings, SettingsDist};
use crate::seeds;
use crate::testset::build_test_set;

#[derive(Debug, thiserror::Error)]
pub enum AblateError {
    #[error(transparent)]
    Driver(#[from] DriverError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Mel(#[from] MelError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("strategy run did not complete: {0}")]
    Incomplete(String),
    #[error("budget {budget} smaller than the initial dataset {initial}")]
    BudgetTooSmall { budget: usize, initial: usize },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> AblateError + '_ {
    move |source| AblateError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Active,
    Uniform,
    Beta,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Active => "active",
            Strategy::Uniform => "uniform",
            Strategy::Beta => "beta",
        }
    }

    fn tag(&self) -> u64 {
        match self {
            Strategy::Active => 1,
            Strategy::Uniform => 2,
            Strategy::Beta => 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ArmResult {
    pub strategy: Strategy,
    pub seed_index: u32,
    pub dataset_size: usize,
    pub report: EvalReport,
    pub run_dir: PathBuf,
}

#[derive(Debug, Clone)]
pub struct StrategyAblation {
    pub arms: Vec<ArmResult>,
    /// (strategy, median test MSE, median test mel) over seed indices.
    pub medians: Vec<(Strategy, f64, f64)>,
}

fn median_of(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Caps per round landing exactly on `budget` total points. Uses the
/// canonical 10/25/75 schedule when it applies.
pub fn caps_for_budget(initial: usize, budget: usize) -> Result<(u32, Vec<usize>), AblateError> {
    if budget < initial {
        return Err(AblateError::BudgetTooSmall { budget, initial });
    }
    let extra = budget - initial;
    if extra == 0 {
        return Ok((0, vec![]));
    }
    if initial == 10 && budget == 75 {
        return Ok((10, ExperimentConfig::schedule_10_25_75()));
    }
    let rounds = extra.div_ceil(7);
    let base = extra / rounds;
    let remainder = extra % rounds;
    let caps: Vec<usize> = (0..rounds).map(|r| base + usize::from(r < remainder)).collect();
    Ok((rounds as u32, caps))
}

/// Prepare a child run directory sharing the parent's input signal.
fn prepare_child_run(parent_input: &Path, dir: &Path, cfg: &ExperimentConfig) -> Result<(), AblateError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    cfg.save(&dir.join("config.json")).map_err(DriverError::from)?;
    let dst = dir.join("input.wav");
    if !dst.exists() {
        std::fs::copy(parent_input, &dst).map_err(io_err(&dst))?;
    }
    Ok(())
}

/// One active-learning arm run to completion; returns its final model.
fn run_active_arm(base: &ExperimentConfig, parent_input: &Path, dir: &Path, seed_index: u32, budget: usize) -> Result<(Model, usize), AblateError> {
    let (rounds, caps) = caps_for_budget(base.initial_points, budget)?;
    let mut cfg = base.clone();
    cfg.seed = seeds::derive(base.seed, &[Strategy::Active.tag(), seed_index as u64]);
    cfg.rounds = rounds;
    cfg.round_caps = if caps.is_empty() { None } else { Some(caps) };
    cfg.checkpoint_rounds.retain(|r| *r <= rounds);
    prepare_child_run(parent_input, dir, &cfg)?;
    let (driver, _lock) = Driver::open(RunDir::at(dir))?;
    match driver.run(None)? {
        RunOutcome::Complete => {}
        other => return Err(AblateError::Incomplete(format!("{other:?}"))),
    }
    let manifest = driver.dataset()?.expect("completed run has a dataset");
    let model = load_model(&RunDir::at(dir).final_model_path()).map_err(DriverError::from)?;
    Ok((model, manifest.len()))
}

/// One baseline arm: sample `budget` settings, label them with the synthetic
/// amp, train the final model. Artifacts persist in `dir` like a run.
fn run_baseline_arm(
    base: &ExperimentConfig,
    parent_input: &Path,
    dir: &Path,
    strategy: Strategy,
    seed_index: u32,
    budget: usize,
) -> Result<(Model, usize), AblateError> {
    let amp = match &base.oracle {
        OracleKind::Synthetic { amp } => amp.clone(),
        OracleKind::Manual => {
            return Err(AblateError::Incomplete("baseline arms need the synthetic oracle".into()))
        }
    };
    std::fs::create_dir_all(dir.join("labels")).map_err(io_err(dir))?;
    let dst = dir.join("input.wav");
    if !dst.exists() {
        std::fs::copy(parent_input, &dst).map_err(io_err(&dst))?;
    }
    let input = ampforge_core::audio::read_wav(&dst).map_err(DriverError::from)?;

    let dist = match strategy {
        Strategy::Uniform => SettingsDist::Uniform,
        Strategy::Beta => SettingsDist::Beta { alpha: 0.5, beta: 0.5 },
        Strategy::Active => unreachable!("active arm handled separately"),
    };
    let settings = sample_settings(
        budget,
        base.k(),
        dist,
        seeds::baseline_seed(base.seed, strategy.tag(), seed_index),
    )
    .expect("strategy parameters are fixed and valid");

    let bytes = std::fs::read(&dst).map_err(io_err(&dst))?;
    let mut manifest = DatasetManifest::new("input.wav", &bytes, base.knob_labels.clone());
    let source = match strategy {
        Strategy::Uniform => Source::RandomBaseline,
        Strategy::Beta => Source::BetaBaseline,
        Strategy::Active => unreachable!(),
    };
    for (i, kv) in settings.iter().enumerate() {
        let y = synth_amp_process(&input, kv, &amp).map_err(DriverError::from)?;
        let rel = format!("labels/round0_req{i}.wav");
        write_wav(&dir.join(&rel), &y, WavEncoding::Float32).map_err(DriverError::from)?;
        manifest.entries.push(DatasetEntry { g: kv.values().to_vec(), output: rel, round: 0, source });
    }
    manifest.save(dir).map_err(DriverError::from)?;

    let data = manifest.materialize(dir).map_err(DriverError::from)?;
    let mut train_cfg = base.final_train.clone();
    train_cfg.seed = seeds::derive(base.seed, &[strategy.tag(), seed_index as u64, seeds::tag::FINAL_TRAIN]);
    let spec = base.spec_for(base.final_arch);
    let (model, _) = train_model(&spec, &data, &train_cfg).map_err(DriverError::from)?;
    std::fs::create_dir_all(dir.join("models")).map_err(io_err(dir))?;
    save_model(&model, &dir.join("models/final.ampmodel")).map_err(DriverError::from)?;
    Ok((model, budget))
}

/// Run the full strategy comparison under `work_dir`. The base config's
/// input signal, oracle, final TrainConfig, and test set are shared by all
/// arms; only the data-collection strategy differs.
pub fn run_strategy_ablation(
    base: &ExperimentConfig,
    base_input: &Path,
    work_dir: &Path,
    budget: usize,
    seed_count: u32,
    strategies: &[Strategy],
) -> Result<StrategyAblation, AblateError> {
    let amp = match &base.oracle {
        OracleKind::Synthetic { amp } => amp.clone(),
        OracleKind::Manual => return Err(AblateError::Incomplete("ablation needs the synthetic oracle".into())),
    };
    let (clips, test_settings) = build_test_set(base);
    let mel_scales: Vec<MelTransform> = base
        .final_train
        .mel_scales
        .iter()
        .map(|c| MelTransform::new(c, base.sample_rate))
        .collect::<Result<_, _>>()?;

    let mut arms = Vec::new();
    for seed_index in 0..seed_count {
        for strategy in strategies {
            let dir = work_dir.join(format!("{}_s{seed_index}", strategy.name()));
            let (model, size) = match strategy {
                Strategy::Active => run_active_arm(base, base_input, &dir, seed_index, budget)?,
                _ => run_baseline_arm(base, base_input, &dir, *strategy, seed_index, budget)?,
            };
            let report = evaluate(
                &model,
                &format!("{}_s{seed_index}", strategy.name()),
                size,
                seed_index as u64,
                &clips,
                &test_settings,
                &amp,
                &mel_scales,
                None,
            )?;
            arms.push(ArmResult {
                strategy: *strategy,
                seed_index,
                dataset_size: size,
                report,
                run_dir: dir,
            });
        }
    }

    let medians = strategies
        .iter()
        .map(|s| {
            let mses: Vec<f64> = arms.iter().filter(|a| a.strategy == *s).map(|a| a.report.mean_mse).collect();
            let mels: Vec<f64> = arms.iter().filter(|a| a.strategy == *s).map(|a| a.report.mean_mel).collect();
            (*s, median_of(mses), median_of(mels))
        })
        .collect();
    Ok(StrategyAblation { arms, medians })
}

pub fn write_strategy_csv(path: &Path, ablation: &StrategyAblation) -> Result<(), AblateError> {
    use std::io::Write;
    let mut out = String::from("strategy,seed,dataset_size,test_mse,test_mel\n");
    for a in &ablation.arms {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            a.strategy.name(),
            a.seed_index,
            a.dataset_size,
            a.report.mean_mse,
            a.report.mean_mel
        ));
    }
    for (s, mse, mel) in &ablation.medians {
        out.push_str(&format!("median_{},,,{mse},{mel}\n", s.name()));
    }
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    f.write_all(out.as_bytes()).map_err(io_err(path))
}

#[derive(Debug, Clone)]
pub struct ArchCombo {
    pub ensemble: ArchKind,
    pub final_model: ArchKind,
    pub ensemble_throughput: f64,
    pub report: EvalReport,
}

fn arch_name(a: ArchKind) -> &'static str {
    match a {
        ArchKind::Lstm => "lstm",
        ArchKind::WaveNet => "wavenet",
    }
}

/// Table-style architecture comparison: for each (ensemble, final)
/// combination, run the active loop and report the mean ensemble training
/// throughput plus final-model test metrics.
pub fn run_architecture_study(
    base: &ExperimentConfig,
    base_input: &Path,
    work_dir: &Path,
    budget: usize,
) -> Result<Vec<ArchCombo>, AblateError> {
    let amp = match &base.oracle {
        OracleKind::Synthetic { amp } => amp.clone(),
        OracleKind::Manual => return Err(AblateError::Incomplete("the study needs the synthetic oracle".into())),
    };
    let (clips, test_settings) = build_test_set(base);
    let mel_scales: Vec<MelTransform> = base
        .final_train
        .mel_scales
        .iter()
        .map(|c| MelTransform::new(c, base.sample_rate))
        .collect::<Result<_, _>>()?;
    let combos = [
        (ArchKind::Lstm, ArchKind::Lstm),
        (ArchKind::WaveNet, ArchKind::WaveNet),
        (ArchKind::Lstm, ArchKind::WaveNet),
    ];
    let mut out = Vec::new();
    for (ens, fin) in combos {
        let dir = work_dir.join(format!("arch_{}_{}", arch_name(ens), arch_name(fin)));
        let (rounds, caps) = caps_for_budget(base.initial_points, budget)?;
        let mut cfg = base.clone();
        cfg.seed = seeds::derive(base.seed, &[91, ens as u64, fin as u64]);
        cfg.ensemble_arch = ens;
        cfg.final_arch = fin;
        cfg.rounds = rounds;
        cfg.round_caps = if caps.is_empty() { None } else { Some(caps) };
        cfg.checkpoint_rounds.retain(|r| *r <= rounds);
        prepare_child_run(base_input, &dir, &cfg)?;
        let (driver, _lock) = Driver::open(RunDir::at(&dir))?;
        match driver.run(None)? {
            RunOutcome::Complete => {}
            other => return Err(AblateError::Incomplete(format!("{other:?}"))),
        }
        // Mean ensemble throughput over the run's rounds.
        let mut speeds = Vec::new();
        for r in 1..=rounds {
            if let Some(rec) = RoundRecord::load(driver.run_dir(), r)? {
                speeds.push(rec.ensemble_throughput);
            }
        }
        let ensemble_throughput = if speeds.is_empty() { 0.0 } else { speeds.iter().sum::<f64>() / speeds.len() as f64 };
        let manifest = driver.dataset()?.expect("completed run has a dataset");
        let model = load_model(&RunDir::at(&dir).final_model_path()).map_err(DriverError::from)?;
        let report = evaluate(
            &model,
            &format!("{}+{}", arch_name(ens), arch_name(fin)),
            manifest.len(),
            cfg.seed,
            &clips,
            &test_settings,
            &amp,
            &mel_scales,
            None,
        )?;
        out.push(ArchCombo { ensemble: ens, final_model: fin, ensemble_throughput, report });
    }
    Ok(out)
}

pub fn write_architecture_csv(path: &Path, combos: &[ArchCombo]) -> Result<(), AblateError> {
    use std::io::Write;
    let mut out = String::from("ensemble,final,ens_train_samples_per_s,test_mse,test_mel\n");
    for c in combos {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            arch_name(c.ensemble),
            arch_name(c.final_model),
            c.ensemble_throughput,
            c.report.mean_mse,
            c.report.mean_mel
        ));
    }
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    f.write_all(out.as_bytes()).map_err(io_err(path))
}

/// Evaluate one clip/settings list against a saved model file; shared by the
/// `eval` subcommand.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_model_file(
    model_path: &Path,
    cfg: &ExperimentConfig,
    clips: &[AudioSignal],
    settings: &[KnobVector],
    save_predictions: Option<&Path>,
) -> Result<EvalReport, AblateError> {
    let amp = match &cfg.oracle {
        OracleKind::Synthetic { amp } => amp.clone(),
        OracleKind::Manual => return Err(AblateError::Incomplete("eval needs the synthetic oracle".into())),
    };
    let mel_scales: Vec<MelTransform> = cfg
        .final_train
        .mel_scales
        .iter()
        .map(|c| MelTransform::new(c, cfg.sample_rate))
        .collect::<Result<_, _>>()?;
    let model = load_model(model_path).map_err(DriverError::from)?;
    let id = model_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(evaluate(&model, &id, 0, cfg.seed, clips, settings, &amp, &mel_scales, save_predictions)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn caps_land_on_budget() {
        let (rounds, caps) = caps_for_budget(10, 75).unwrap();
        assert_eq!(rounds, 10);
        assert_eq!(10 + caps.iter().sum::<usize>(), 75);

        let (rounds, caps) = caps_for_budget(10, 10).unwrap();
        assert_eq!(rounds, 0);
        assert!(caps.is_empty());

        let (rounds, caps) = caps_for_budget(10, 30).unwrap();
        assert_eq!(caps.len(), rounds as usize);
        assert_eq!(10 + caps.iter().sum::<usize>(), 30);
        assert!(caps.iter().all(|c| *c >= 1));

        assert!(caps_for_budget(10, 5).is_err());
    }
}
