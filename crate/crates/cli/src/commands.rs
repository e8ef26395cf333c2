use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use acsac_core::analysis::{
    calibration, calibration_csv, calibration_spearman, chunk_csv, chunk_distribution,
    gradient_variance, region_test,
};
use acsac_core::envs::{generate_offline_data, Dataset};
use acsac_core::io::{load_checkpoint, load_dataset, save_checkpoint, save_dataset, write_atomic, Checkpoint};
use acsac_core::operator_lab::verify_theory;
use acsac_core::train::{EvalReport, RunConfig, RunState};

#[derive(Debug, Parser)]
#[command(name = "acsac", version, about = "Adaptive action-chunking actor-critic lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (JSON).
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DataArg {
    /// Dataset file; defaults to `<out>/dataset.acsd`, regenerated from the config if absent.
    #[arg(long, value_name = "PATH")]
    pub dataset: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the scripted offline dataset.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Offline training from fresh networks.
    TrainOffline {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Online fine-tuning from a checkpoint.
    TrainOnline {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Defaults to `<out>/checkpoint.acsc`.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Evaluate a checkpoint and write per-decision logs.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Chunk-size distribution, calibration, region test and gradient variance.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Evaluation logs; defaults to `<out>/eval_logs.json`.
        #[arg(long, value_name = "PATH")]
        logs: Option<PathBuf>,
        /// Also run the gradient-variance probe on this checkpoint.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        #[arg(long, default_value_t = 10_000)]
        permutations: usize,
        #[arg(long, default_value_t = 256)]
        variance_batches: usize,
        /// Accept logs written under a different config hash.
        #[arg(long)]
        force: bool,
    },
    /// Exact tabular checks of the backup operator.
    VerifyTheory {
        #[arg(long, value_name = "PATH")]
        config: Option<PathBuf>,
        #[arg(long, value_name = "U64", default_value_t = 0)]
        seed: u64,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

#[derive(Debug)]
pub enum CliError {
    /// Bad input the user can fix: config, flags, mismatched artifacts.
    Usage(String),
    /// A check the run asserts did not hold.
    Assertion(String),
    Runtime(acsac_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Assertion(_) | CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Assertion(m) => write!(f, "assertion failed: {m}"),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

impl From<acsac_core::Error> for CliError {
    fn from(e: acsac_core::Error) -> Self {
        match e {
            acsac_core::Error::Config(m) => CliError::Usage(format!("invalid config: {m}")),
            other => CliError::Runtime(other),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn load_config(common: &Common) -> CliResult<RunConfig> {
    load_config_path(&common.config, common.seed)
}

fn load_config_path(path: &Path, seed: Option<u64>) -> CliResult<RunConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut config = RunConfig::from_json(&text)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    Ok(config)
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(acsac_core::Error::from)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn write_text(path: &Path, text: &str) -> CliResult {
    write_atomic(path, text.as_bytes())?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn dataset_for(config: &RunConfig, arg: &DataArg, out: &Path) -> CliResult<Dataset> {
    let default = out.join("dataset.acsd");
    match &arg.dataset {
        Some(p) => Ok(load_dataset(p)?),
        None if default.exists() => Ok(load_dataset(&default)?),
        None => {
            log::info!("no dataset under {}; regenerating from the config", out.display());
            generate(config)
        }
    }
}

fn generate(config: &RunConfig) -> CliResult<Dataset> {
    Ok(generate_offline_data(
        &config.maze()?,
        &config.behavior,
        config.data_seed(),
        config.dataset_episodes,
    ))
}

fn restore(config: RunConfig, dataset: Dataset, path: &Path, force: bool) -> CliResult<RunState> {
    let ck = load_checkpoint(path)?;
    if ck.header.config_hash != config.hash() && !force {
        log::warn!(
            "checkpoint {} was written under config hash {}, current hash is {}",
            path.display(),
            ck.header.config_hash,
            config.hash()
        );
    }
    Ok(ck.into_run_state(config, dataset)?)
}

fn metrics_lines(run: &RunState) -> CliResult<String> {
    let hash = run.config.hash();
    let mut out = String::new();
    for m in &run.metrics {
        let mut v = serde_json::to_value(m).map_err(acsac_core::Error::from)?;
        if let Value::Object(map) = &mut v {
            map.insert("config_hash".into(), Value::String(hash.clone()));
        }
        out.push_str(&v.to_string());
        out.push('\n');
    }
    Ok(out)
}

pub fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::GenData { common } => {
            let config = load_config(&common)?;
            let data = generate(&config)?;
            save_dataset(&common.out.join("dataset.acsd"), &data)?;
            let successes = data.episodes.iter().filter(|e| e.terminated()).count();
            write_json(
                &common.out.join("gen_data.json"),
                &json!({
                    "config_hash": config.hash(),
                    "generator_seed": data.meta.generator_seed,
                    "episodes": data.episodes.len(),
                    "transitions": data.num_transitions(),
                    "successes": successes,
                }),
            )
        }
        Command::TrainOffline { common, data, steps } => {
            let config = load_config(&common)?;
            let dataset = dataset_for(&config, &data, &common.out)?;
            let steps = steps.unwrap_or(config.offline_steps);
            let mut run = RunState::new(config, dataset)?;
            run.run_offline(steps)?;
            save_checkpoint(&common.out.join("checkpoint.acsc"), &Checkpoint::from_run(&run))?;
            write_text(&common.out.join("metrics_offline.jsonl"), &metrics_lines(&run)?)
        }
        Command::TrainOnline {
            common,
            data,
            checkpoint,
            steps,
        } => {
            let config = load_config(&common)?;
            let dataset = dataset_for(&config, &data, &common.out)?;
            let steps = steps.unwrap_or(config.online_steps);
            let path = checkpoint.unwrap_or_else(|| common.out.join("checkpoint.acsc"));
            let mut run = restore(config, dataset, &path, false)?;
            run.run_online(steps)?;
            save_checkpoint(&common.out.join("checkpoint.acsc"), &Checkpoint::from_run(&run))?;
            write_text(&common.out.join("metrics_online.jsonl"), &metrics_lines(&run)?)?;
            write_json(&common.out.join("online_episodes.json"), &json!({
                "config_hash": run.config.hash(),
                "episodes": run.online_episodes,
            }))
        }
        Command::Eval {
            common,
            data,
            checkpoint,
            episodes,
        } => {
            let config = load_config(&common)?;
            let dataset = dataset_for(&config, &data, &common.out)?;
            let episodes = episodes.unwrap_or(config.eval_episodes);
            let path = checkpoint.unwrap_or_else(|| common.out.join("checkpoint.acsc"));
            let run = restore(config, dataset, &path, false)?;
            let report = run.evaluate(episodes)?;
            log::info!(
                "success {:.3}, mean return {:.3}, mean h {:.3}",
                report.success_rate,
                report.mean_return,
                report.mean_h
            );
            write_json(&common.out.join("eval_logs.json"), &report)
        }
        Command::Analyze {
            common,
            data,
            logs,
            checkpoint,
            bins,
            permutations,
            variance_batches,
            force,
        } => {
            let config = load_config(&common)?;
            let path = logs.unwrap_or_else(|| common.out.join("eval_logs.json"));
            let text = fs::read_to_string(&path)
                .map_err(|e| CliError::Usage(format!("cannot read logs {}: {e}", path.display())))?;
            let report: EvalReport = serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("malformed logs {}: {e}", path.display())))?;
            let hash = config.hash();
            if report.config_hash != hash {
                if !force {
                    return Err(CliError::Usage(format!(
                        "logs were written under config hash {}, supplied config hashes to {hash}; pass --force to analyze anyway",
                        report.config_hash
                    )));
                }
                log::warn!("analyzing logs from a different config hash");
            }
            let rows = chunk_distribution(&report);
            write_text(&common.out.join("chunk_distribution.csv"), &chunk_csv(&rows))?;
            let cal = calibration(&report, bins)?;
            write_text(&common.out.join("calibration.csv"), &calibration_csv(&cal))?;
            let region = match region_test(&report, permutations, config.seed) {
                Ok(r) => json!(r),
                Err(e) => {
                    log::warn!("region test skipped: {e}");
                    Value::Null
                }
            };
            let spearman = calibration_spearman(&cal);
            let variance = match &checkpoint {
                Some(ck) => {
                    let dataset = dataset_for(&config, &data, &common.out)?;
                    let run = restore(config.clone(), dataset, ck, force)?;
                    Some(gradient_variance(&run, variance_batches, config.seed)?)
                }
                None => None,
            };
            write_json(
                &common.out.join("analysis.json"),
                &json!({
                    "config_hash": hash,
                    "logs_config_hash": report.config_hash,
                    "step": report.step,
                    "success_rate": report.success_rate,
                    "calibration_spearman": if spearman.is_finite() { json!(spearman) } else { Value::Null },
                    "region_test": region,
                    "gradient_variance": variance,
                }),
            )?;
            match variance {
                Some(v) if !v.holds => Err(CliError::Assertion(format!(
                    "Var(mean gradient) = {} exceeds max per-horizon variance",
                    v.mean_gradient_variance
                ))),
                _ => Ok(()),
            }
        }
        Command::VerifyTheory { config, seed, out } => {
            let config = match &config {
                Some(p) => load_config_path(p, None)?,
                None => RunConfig::default(),
            };
            let report = verify_theory(seed)?;
            for c in &report.checks {
                log::info!(
                    "{} {}: measured {:e}, bound {:e}",
                    if c.passed { "pass" } else { "FAIL" },
                    c.name,
                    c.measured,
                    c.bound
                );
            }
            let mut value = serde_json::to_value(&report).map_err(acsac_core::Error::from)?;
            if let Value::Object(map) = &mut value {
                map.insert("config_hash".into(), Value::String(config.hash()));
                map.insert("all_passed".into(), Value::Bool(report.all_passed()));
            }
            write_json(&out.join("theory_report.json"), &value)?;
            let failed: Vec<&str> = report.failures().map(|c| c.name.as_str()).collect();
            if failed.is_empty() {
                Ok(())
            } else {
                Err(CliError::Assertion(format!("theory checks failed: {}", failed.join(", "))))
            }
        }
    }
}
