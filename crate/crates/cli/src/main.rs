use std::path::PathBuf;
use std::process::ExitCode;

use ampforge_cli::ablate::{
    run_architecture_study, run_strategy_ablation, write_architecture_csv, write_strategy_csv, Strategy,
};
use ampforge_cli::config::ExperimentConfig;
use ampforge_cli::dataset::DatasetManifest;
use ampforge_cli::eval::write_eval_csv;
use ampforge_cli::experiment::{Driver, RunOutcome};
use ampforge_cli::report::{g_component_histogram, write_histogram_csv};
use ampforge_cli::rundir::RunDir;
use ampforge_cli::testset::{build_test_set, persist_test_set};
use ampforge_core::models::save_model;
use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "ampforge",
    about = "Knob-conditioned neural amp modeling with ensemble-disagreement data acquisition",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum OracleArg {
    Synthetic,
    Manual,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblateMode {
    Strategies,
    Architectures,
}

#[derive(Subcommand)]
enum Command {
    /// Write a default config.json into a new run directory.
    Init {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = OracleArg::Synthetic)]
        oracle: OracleArg,
        /// Cap rounds so dataset sizes hit 10/25/75 at rounds 0/2/10.
        #[arg(long)]
        schedule_10_25_75: bool,
    },
    /// Run the active-learning loop (resumable).
    AlRun {
        #[arg(long)]
        dir: PathBuf,
        /// Stop after completing this round (for inspection or staging).
        #[arg(long)]
        stop_after_round: Option<u32>,
    },
    /// Run one acquisition round: train the ensemble, propose settings.
    Propose {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Export the pending round's request manifest for manual labeling.
    ExportRequests {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Import recordings for the pending round.
    Ingest {
        #[arg(long)]
        dir: PathBuf,
        /// Directory holding the recordings plus the exported input WAV.
        #[arg(long)]
        recordings: PathBuf,
    },
    /// Label the pending round with the synthetic amp.
    LabelSynth {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Train the final model on the current dataset.
    TrainFinal {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a saved model on the configured test set.
    Eval {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also persist prediction WAVs next to the report.
        #[arg(long)]
        save_predictions: bool,
    },
    /// Compare sampling strategies or architecture combinations.
    Ablate {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, value_enum, default_value_t = AblateMode::Strategies)]
        mode: AblateMode,
        #[arg(long, default_value_t = 75)]
        budget: usize,
        #[arg(long, default_value_t = 3)]
        seeds: u32,
    },
    /// Emit the histogram of actively acquired knob components.
    Report {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Init { dir, seed, oracle, schedule_10_25_75 } => {
            let rd = RunDir::at(&dir);
            rd.ensure_layout()?;
            let path = rd.config_path();
            if path.exists() {
                bail!("{} already exists", path.display());
            }
            let mut cfg = ExperimentConfig::desk_default(seed);
            if matches!(oracle, OracleArg::Manual) {
                cfg.oracle = ampforge_cli::config::OracleKind::Manual;
            }
            if schedule_10_25_75 {
                cfg.round_caps = Some(ExperimentConfig::schedule_10_25_75());
            }
            cfg.save(&path)?;
            println!("wrote {}", path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::AlRun { dir, stop_after_round } => {
            let (driver, _lock) = Driver::open(RunDir::at(&dir))?;
            match driver.run(stop_after_round)? {
                RunOutcome::Complete => {
                    println!("status: complete");
                    println!("final model: {}", RunDir::at(&dir).final_model_path().display());
                }
                RunOutcome::AwaitingIngest { round } => {
                    println!("status: awaiting-ingest round={round}");
                    println!(
                        "record the requests in {} and resume with `ampforge ingest`",
                        RunDir::at(&dir).exchange_dir().display()
                    );
                }
                RunOutcome::Stopped { after_round } => {
                    println!("status: stopped after round {after_round}");
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Propose { dir } => {
            let (driver, _lock) = Driver::open(RunDir::at(&dir))?;
            if driver.dataset()?.is_none() {
                bail!("no dataset yet; run `al-run` or `label-synth` first to create round 0");
            }
            let manifest = driver.dataset()?.expect("checked above");
            let round = manifest.last_round().map_or(0, |r| r + 1);
            if round > driver.cfg.rounds {
                bail!("all {} rounds已 already labeled", driver.cfg.rounds);
            }
            let record = driver.propose_round(round)?;
            println!("round {round}: {} proposals", record.proposals.len());
            for p in &record.proposals {
                println!("  D*={:.6e} g={:?}", p.d_star, p.g);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::ExportRequests { dir } => {
            let (driver, _lock) = Driver::open(RunDir::at(&dir))?;
            match driver.pending_round()? {
                Some(record) => {
                    let manifest = driver.export_round_requests(&record)?;
                    println!(
                        "exported {} requests for round {} to {}",
                        manifest.requests.len(),
                        record.round,
                        RunDir::at(&dir).exchange_dir().display()
                    );
                }
                None => {
                    // Round 0 with no dataset yet: export the initial points.
                    if driver.dataset()?.is_none() {
                        let settings = driver.initial_settings()?;
                        let manifest =
                            ampforge_core::amp::export_request_manifest(&settings, 0, driver.input(), &RunDir::at(&dir).exchange_dir())?;
                        println!(
                            "exported {} initial requests to {}",
                            manifest.requests.len(),
                            RunDir::at(&dir).exchange_dir().display()
                        );
                    } else {
                        bail!("no round is awaiting labels; run `propose` first");
                    }
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Ingest { dir, recordings } => {
            let (driver, _lock) = Driver::open(RunDir::at(&dir))?;
            let round = driver.ingest(&recordings)?;
            println!("ingested round {round}");
            Ok(ExitCode::SUCCESS)
        }
        Command::LabelSynth { dir } => {
            let (driver, _lock) = Driver::open(RunDir::at(&dir))?;
            if driver.dataset()?.is_none() {
                driver.ensure_initial()?;
                println!("labeled round 0 (initial dataset)");
                return Ok(ExitCode::SUCCESS);
            }
            match driver.pending_round()? {
                Some(record) => {
                    driver.label_round_synth(&record)?;
                    println!("labeled round {}", record.round);
                }
                None => bail!("no proposed round awaiting labels; run `propose` first"),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::TrainFinal { dir, out } => {
            let (driver, _lock) = Driver::open(RunDir::at(&dir))?;
            let round = driver.dataset()?.and_then(|m| m.last_round()).unwrap_or(0);
            let (model, report) = driver.train_final_at(round)?;
            let path = out.unwrap_or_else(|| RunDir::at(&dir).final_model_path());
            save_model(&model, &path)?;
            println!(
                "trained final model on the round-{round} dataset: best epoch {} loss {:.6e}",
                report.best_epoch,
                report.epoch_losses[report.best_epoch]
            );
            println!("saved {}", path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval { dir, model, out, save_predictions } => {
            let rd = RunDir::at(&dir);
            rd.require_initialized()?;
            let cfg = ExperimentConfig::load(&rd.config_path())?;
            let (clips, settings) = build_test_set(&cfg);
            persist_test_set(&rd.reports_dir().join("testset"), &clips, &settings)
                .context("persisting test set")?;
            let pred_dir = rd.reports_dir().join("predictions");
            let report = ampforge_cli::ablate::evaluate_model_file(
                &model,
                &cfg,
                &clips,
                &settings,
                save_predictions.then_some(pred_dir.as_path()),
            )?;
            let out = out.unwrap_or_else(|| rd.reports_dir().join("eval.csv"));
            write_eval_csv(&out, &report)?;
            println!(
                "eval {}: mean MSE {:.6e}, mean mel {:.4} over {} pairs -> {}",
                report.model_id,
                report.mean_mse,
                report.mean_mel,
                report.rows.len(),
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Ablate { dir, mode, budget, seeds } => {
            let rd = RunDir::at(&dir);
            rd.require_initialized()?;
            rd.ensure_layout()?;
            let cfg = ExperimentConfig::load(&rd.config_path())?;
            // Make sure the shared input exists.
            let (driver, lock) = Driver::open(RunDir::at(&dir))?;
            drop(driver);
            drop(lock);
            match mode {
                AblateMode::Strategies => {
                    let work = rd.root().join("ablation");
                    let result = run_strategy_ablation(
                        &cfg,
                        &rd.input_path(),
                        &work,
                        budget,
                        seeds,
                        &[Strategy::Active, Strategy::Uniform, Strategy::Beta],
                    )?;
                    let out = rd.reports_dir().join("ablation_strategies.csv");
                    write_strategy_csv(&out, &result)?;
                    for (s, mse, mel) in &result.medians {
                        println!("{:8} median MSE {mse:.6e} median mel {mel:.4}", s.name());
                    }
                    println!("wrote {}", out.display());
                }
                AblateMode::Architectures => {
                    let work = rd.root().join("arch-study");
                    let combos = run_architecture_study(&cfg, &rd.input_path(), &work, budget)?;
                    let out = rd.reports_dir().join("ablation_architectures.csv");
                    write_architecture_csv(&out, &combos)?;
                    for c in &combos {
                        println!(
                            "{:?}+{:?}: ens {:.0} samples/s, MSE {:.6e}, mel {:.4}",
                            c.ensemble, c.final_model, c.ensemble_throughput, c.report.mean_mse, c.report.mean_mel
                        );
                    }
                    println!("wrote {}", out.display());
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { dir, out } => {
            let rd = RunDir::at(&dir);
            rd.require_initialized()?;
            rd.ensure_layout()?;
            let manifest = if DatasetManifest::manifest_path(rd.root()).exists() {
                DatasetManifest::load(rd.root())?
            } else {
                DatasetManifest::new("input.wav", b"", ExperimentConfig::load(&rd.config_path())?.knob_labels)
            };
            let hist = g_component_histogram(&manifest);
            let out = out.unwrap_or_else(|| rd.reports_dir().join("g_histogram.csv"));
            write_histogram_csv(&out, &hist)?;
            println!(
                "{} active components, {:.1}% within 0.1 of the bounds",
                hist.components.len(),
                100.0 * hist.extremal_fraction(0.1)
            );
            if let Some((a, b)) = hist.beta_fit {
                println!("beta fit: alpha={a:.4} beta={b:.4}");
            }
            println!("wrote {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}
