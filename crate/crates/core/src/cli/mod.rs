//! The `aatrace` command line: `train`, `attribute`, `retrain` and
//! `evaluate`, each driven by a JSON config.
//!
//! Artifacts go under the config's `output_dir` (or `--out`):
//!
//! ```text
//! <out>/log/                      manifest.json, states.bin, steps.csv
//! <out>/attribution/              scores.csv, summary.json
//! <out>/retrain/<name>/log/       counterfactual trajectory
//! <out>/retrain/<name>/true_effects.csv
//! ```
//!
//! Forward attribution caches the per-step effect vectors in
//! `$AATRACE_CACHE_DIR/<log fingerprint>/<mode>/effects.bin`, or under
//! `<log>/cache/` when the variable is unset.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data or log integrity
//! error, 4 numerical failure.

mod config;
mod data;

pub use config::{Batching, DataSource, LoadedConfig, LrDecay, NamedStage, RunConfig, ScheduleConfig};
pub use data::{load_dataset_csv, write_dataset_csv};

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde_json::json;

use crate::attribution::{final_perf_grads, forward_scores, load_effects, save_effects, AttributionResult, Attributor, Direction, EffectTable, PropagationMode};
use crate::counterfactual::{skip_steps_from_log, true_effect};
use crate::error::{Error, Result};
use crate::model::{perf_value_grad, Dataset};
use crate::scenarios::{run_scenario, EvaluationReport, ScenarioConfig};
use crate::training::{load_log, save_log, train, verify_replay, TrajectoryLog, FORMAT_VERSION};

pub const CACHE_ENV: &str = "AATRACE_CACHE_DIR";

#[derive(Debug, Parser)]
#[command(name = "aatrace", version, about = "Attribute a trained model's behavior to its training steps and stages")]
pub struct Cli {
    /// Worker threads for adjoint sweeps and oracle retraining.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train and write the trajectory log.
    Train(TrainArgs),
    /// Score every step (and configured stage) on the test points.
    Attribute(AttributeArgs),
    /// Retrain with steps or a stage skipped and record the true effects.
    Retrain(RetrainArgs),
    /// Run a scenario end to end and correlate estimates with retraining.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct AttributeArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Log directory; `<out>/log` by default.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// hvp, matrix or layerwise.
    #[arg(long)]
    pub mode: Option<PropagationMode>,
    /// forward or adjoint.
    #[arg(long)]
    pub direction: Option<Direction>,
    /// CSV of test points replacing the configured test data.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Also report joint-skip stage scores.
    #[arg(long)]
    pub joint: bool,
}

#[derive(Debug, Args)]
pub struct RetrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated steps to skip.
    #[arg(long, value_delimiter = ',', conflicts_with = "stage")]
    pub skip: Vec<usize>,
    /// Name of a configured stage to skip.
    #[arg(long)]
    pub stage: Option<String>,
    /// Output subdirectory; the stage name or `skip` by default.
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub test: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Scenario config.
    #[arg(long)]
    pub config: PathBuf,
    /// Report directory; `reports/<variant>` by default.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn out_dir(loaded: &LoadedConfig, out: &Option<PathBuf>) -> PathBuf {
    out.clone().unwrap_or_else(|| loaded.config.output_dir.clone())
}

pub struct TrainOutcome {
    pub log_dir: PathBuf,
    pub log: TrajectoryLog,
}

pub fn cmd_train(loaded: &LoadedConfig, out: &Path) -> Result<TrainOutcome> {
    let cfg = &loaded.config;
    let data = loaded.train_data()?;
    let schedule = cfg.schedule.build()?;
    let plan = cfg.plan(data.len())?;
    let log = train(&cfg.model, &data, &schedule, &plan, cfg.seed)?;
    let log_dir = out.join("log");
    save_log(&log, &log_dir)?;
    Ok(TrainOutcome { log_dir, log })
}

fn load_verified(path: &Path, data: &Dataset) -> Result<TrajectoryLog> {
    let log = load_log(path)?;
    log.check_dataset(data)?;
    verify_replay(&log, data)?;
    Ok(log)
}

fn cache_file(log_dir: &Path, fingerprint: &str, mode: PropagationMode) -> PathBuf {
    let root = std::env::var_os(CACHE_ENV).map(PathBuf::from).unwrap_or_else(|| log_dir.join("cache"));
    root.join(fingerprint).join(mode.to_string()).join("effects.bin")
}

pub struct AttributeOutcome {
    pub dir: PathBuf,
    pub result: AttributionResult,
    /// `hit`, `written` or `unused`.
    pub cache: &'static str,
}

pub fn cmd_attribute(loaded: &LoadedConfig, args: &AttributeArgs, out: &Path) -> Result<AttributeOutcome> {
    let cfg = &loaded.config;
    let data = loaded.train_data()?;
    let log_dir = args.log.clone().unwrap_or_else(|| out.join("log"));
    let log = load_verified(&log_dir, &data)?;
    let test = match &args.test {
        Some(p) => load_dataset_csv(p)?,
        None => loaded.test_data()?,
    };
    let mode = args.mode.unwrap_or(cfg.mode);
    let direction = args.direction.unwrap_or(cfg.direction);
    let stages = cfg.stage_specs()?;
    let attributor = Attributor::new(&log, &data, mode)?;
    let grads = final_perf_grads(&log, test.points(), cfg.perf)?;

    let (per_point, cache) = match direction {
        Direction::Forward => {
            let fingerprint = log.fingerprint();
            let path = cache_file(&log_dir, &fingerprint, mode);
            let cached = match load_effects(&path) {
                Ok(t) if t.log_fingerprint == fingerprint && t.mode == mode && t.effects.len() == log.num_steps() => Some(t.effects),
                Ok(_) => None,
                Err(Error::Io { .. }) => None,
                Err(e) => {
                    eprintln!("warning: ignoring effect cache {}: {e}", path.display());
                    None
                }
            };
            let (effects, status) = match cached {
                Some(e) => (e, "hit"),
                None => {
                    let effects = attributor.all_step_effects()?;
                    let table = EffectTable {
                        log_fingerprint: fingerprint,
                        mode,
                        effects,
                    };
                    save_effects(&table, &path)?;
                    (table.effects, "written")
                }
            };
            (forward_scores(&effects, &grads)?, status)
        }
        Direction::Adjoint => (
            grads
                .par_iter()
                .map(|(_, g)| attributor.adjoint_step_scores(g))
                .collect::<Result<Vec<_>>>()?,
            "unused",
        ),
    };
    let mut result = AttributionResult::from_point_scores(&log, per_point, &stages, cfg.perf, mode, direction, attributor.hvp_count())?;
    if args.joint {
        for s in &mut result.stages {
            s.joint = Some(attributor.joint_stage_scores(&s.steps, test.points(), cfg.perf)?);
        }
        result.hvp_count = attributor.hvp_count();
    }
    let dir = out.join("attribution");
    result.write(
        &dir,
        json!({
            "format_version": FORMAT_VERSION,
            "config_hash": cfg.hash(),
            "effects_cache": cache,
        }),
    )?;
    Ok(AttributeOutcome { dir, result, cache })
}

pub struct RetrainOutcome {
    pub dir: PathBuf,
    pub skipped: Vec<usize>,
    pub effects: Vec<f64>,
}

pub fn cmd_retrain(loaded: &LoadedConfig, args: &RetrainArgs, out: &Path) -> Result<RetrainOutcome> {
    let cfg = &loaded.config;
    let data = loaded.train_data()?;
    let log_dir = args.log.clone().unwrap_or_else(|| out.join("log"));
    let observed = load_verified(&log_dir, &data)?;
    let test = match &args.test {
        Some(p) => load_dataset_csv(p)?,
        None => loaded.test_data()?,
    };
    let (skipped, default_name) = match &args.stage {
        Some(name) => {
            let stage = cfg
                .stages
                .iter()
                .find(|s| &s.name == name)
                .ok_or_else(|| Error::InvalidInput(format!("no stage named `{name}` in the config")))?;
            (stage.spec()?.steps().to_vec(), name.clone())
        }
        None => (args.skip.clone(), "skip".to_string()),
    };
    let cf = skip_steps_from_log(&observed, &data, &skipped)?;
    let dir = out.join("retrain").join(args.name.clone().unwrap_or(default_name));
    save_log(&cf, dir.join("log"))?;
    let effects = true_effect(&observed, &cf, test.points(), cfg.perf)?;
    let path = dir.join("true_effects.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::malformed(&path, e))?;
    w.write_record(["test_point_id", "observed", "counterfactual", "effect"])
        .map_err(|e| Error::malformed(&path, e))?;
    for (i, (pt, eff)) in test.points().iter().zip(&effects).enumerate() {
        let (a, _) = perf_value_grad(&cfg.model, observed.final_theta(), pt, cfg.perf)?;
        let (b, _) = perf_value_grad(&cfg.model, cf.final_theta(), pt, cfg.perf)?;
        w.serialize((i, a, b, eff)).map_err(|e| Error::malformed(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(RetrainOutcome {
        dir,
        skipped: cf.skipped_steps.unwrap_or_default(),
        effects,
    })
}

pub fn cmd_evaluate(config: &ScenarioConfig, out: &Path) -> Result<EvaluationReport> {
    let report = run_scenario(config)?;
    report.write(out)?;
    Ok(report)
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => {
            let mut loaded = LoadedConfig::load(&a.config)?;
            if let Some(s) = a.seed {
                loaded.config.seed = s;
            }
            let out = out_dir(&loaded, &a.out);
            let r = cmd_train(&loaded, &out)?;
            let loss = r.log.steps.last().map_or(f64::NAN, |s| s.loss);
            println!("K={} p={} final_loss={loss:.6} log={}", r.log.num_steps(), r.log.param_count(), r.log_dir.display());
        }
        Command::Attribute(a) => {
            let loaded = LoadedConfig::load(&a.config)?;
            let out = out_dir(&loaded, &a.out);
            let r = cmd_attribute(&loaded, a, &out)?;
            println!(
                "steps={} points={} mode={} direction={} hvp_count={} cache={} out={}",
                r.result.num_steps(),
                r.result.num_points(),
                r.result.mode,
                r.result.direction,
                r.result.hvp_count,
                r.cache,
                r.dir.display()
            );
            for s in &r.result.stages {
                let mean = s.scores.iter().sum::<f64>() / s.scores.len().max(1) as f64;
                println!("stage {} mean_score={mean:.6e}", s.name);
            }
        }
        Command::Retrain(a) => {
            let loaded = LoadedConfig::load(&a.config)?;
            let out = out_dir(&loaded, &a.out);
            let r = cmd_retrain(&loaded, a, &out)?;
            let mean = r.effects.iter().sum::<f64>() / r.effects.len().max(1) as f64;
            println!("skipped={:?} mean_effect={mean:.6e} out={}", r.skipped, r.dir.display());
        }
        Command::Evaluate(a) => {
            let config = ScenarioConfig::load(&a.config)?;
            let out = a.out.clone().unwrap_or_else(|| Path::new("reports").join(config.scenario.variant_name()));
            let r = cmd_evaluate(&config, &out)?;
            for u in &r.units {
                println!("{:<14} pearson={:+.4} spearman={:+.4}", u.name, u.pearson, u.spearman);
            }
            println!("pearson={:.4} spearman={:.4} min_pearson={:.4} runtime={:.2}s", r.pearson, r.spearman, r.min_pearson, r.runtime_seconds);
            for (k, v) in &r.checks {
                println!("check {k}={v}");
            }
            fs::metadata(out.join("report.json")).map_err(|e| Error::io(out.join("report.json"), e))?;
        }
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let outcome = match cli.jobs {
        Some(0) => Err(Error::InvalidInput("--jobs must be at least 1".into())),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(&cli)),
            Err(e) => Err(Error::InvalidInput(format!("thread pool: {e}"))),
        },
        None => dispatch(&cli),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
