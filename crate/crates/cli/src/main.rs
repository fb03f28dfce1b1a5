use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use dyensemble::decoder::{DecoderKind, DecoderSettings};
use dyensemble::eval::{weight_speed_histogram, write_dominance_csv, write_metrics_csv, write_weights_by_speed_csv};
use dyensemble::offline::{run_offline, OfflineConfig};
use dyensemble::simulator::{run_session, BlockPlan, BrainConfig, PlannerLimits, SessionPlan, SessionSettings};
use dyensemble::verify::{run_suite, Suite};
use dyensemble::Error;

#[derive(Parser)]
#[command(name = "dyens", version, about = "Dynamic-ensemble decoding simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one calibration + test session against a synthetic brain.
    Session {
        config: PathBuf,
        #[arg(long, default_value = "dyensemble")]
        decoder: DecoderKind,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Open-loop decoder comparison on an encoder-switching dataset.
    Offline {
        config: PathBuf,
        #[arg(long, num_args = 1.., default_values_t = [0.98])]
        alphas: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run a built-in check suite.
    Verify {
        #[arg(long, default_value = "unit")]
        suite: Suite,
    },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TaskSection {
    limits: PlannerLimits,
    trials_per_block: usize,
    target_distance: f64,
    calibration_timeout: f64,
    test_timeout: f64,
    max_attempts: usize,
}

impl Default for TaskSection {
    fn default() -> Self {
        let s = SessionSettings::default();
        Self {
            limits: s.limits,
            trials_per_block: s.trials_per_block,
            target_distance: s.target_distance,
            calibration_timeout: s.calibration_timeout,
            test_timeout: s.test_timeout,
            max_attempts: s.max_attempts,
        }
    }
}

/// Either `{"n_rtp_blocks": n}` for the standard plan or an explicit block list.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanSection {
    n_rtp_blocks: Option<usize>,
    blocks: Option<Vec<BlockPlan>>,
}

impl PlanSection {
    fn plan(&self) -> Result<SessionPlan, Error> {
        match (&self.n_rtp_blocks, &self.blocks) {
            (Some(_), Some(_)) => Err(Error::InvalidConfig("session_plan: give n_rtp_blocks or blocks, not both".into())),
            (_, Some(b)) => Ok(SessionPlan { blocks: b.clone() }),
            (n, None) => Ok(SessionPlan::standard(n.unwrap_or(3))),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SessionConfig {
    #[serde(default)]
    task: TaskSection,
    brain: BrainConfig,
    #[serde(default)]
    filter: DecoderSettings,
    #[serde(default)]
    session_plan: PlanSection,
    #[serde(default)]
    seed: u64,
}

#[derive(Serialize)]
struct Phase {
    name: &'static str,
    seconds: f64,
}

#[derive(Serialize)]
struct RunManifest {
    command: &'static str,
    config_path: String,
    config_sha256: String,
    seed: u64,
    decoder: Option<String>,
    alphas: Option<Vec<f64>>,
    versions: BTreeMap<&'static str, &'static str>,
    outputs: Vec<String>,
    phases: Vec<Phase>,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Config(anyhow::Error),
    Calibration(anyhow::Error),
    Other(anyhow::Error),
}

impl Failure {
    fn from_lib(e: Error, ctx: &str) -> Self {
        let wrapped = anyhow::Error::new(e.clone()).context(ctx.to_string());
        match e {
            Error::InvalidConfig(_) => Failure::Config(wrapped),
            Error::CalibrationFailed(_) => Failure::Calibration(wrapped),
            _ => Failure::Other(wrapped),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

fn read_config(path: &Path) -> Result<(Vec<u8>, String), Failure> {
    let bytes = fs::read(path).with_context(|| format!("cannot read config {}", path.display())).map_err(Failure::Config)?;
    let hash = hex::encode(Sha256::digest(&bytes));
    Ok((bytes, hash))
}

fn parse<T: for<'de> Deserialize<'de>>(bytes: &[u8], path: &Path) -> Result<T, Failure> {
    serde_json::from_slice(bytes).with_context(|| format!("invalid config {}", path.display())).map_err(Failure::Config)
}

/// Write via a sibling temp file and rename, so readers never see a partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

fn emit(out_dir: &Path, name: &str, bytes: &[u8], outputs: &mut Vec<String>) -> anyhow::Result<()> {
    write_atomic(&out_dir.join(name), bytes)?;
    outputs.push(name.to_string());
    Ok(())
}

fn versions() -> BTreeMap<&'static str, &'static str> {
    BTreeMap::from([("dyensemble", dyensemble::VERSION), ("dyens-cli", env!("CARGO_PKG_VERSION"))])
}

fn cmd_session(config: &Path, decoder: DecoderKind, seed: Option<u64>, out_dir: &Path) -> Result<(), Failure> {
    let t0 = Instant::now();
    let (bytes, hash) = read_config(config)?;
    let cfg: SessionConfig = parse(&bytes, config)?;
    let seed = seed.unwrap_or(cfg.seed);
    let plan = cfg.session_plan.plan().map_err(|e| Failure::from_lib(e, "session_plan"))?;
    let settings = SessionSettings {
        limits: cfg.task.limits,
        decoder: cfg.filter,
        trials_per_block: cfg.task.trials_per_block,
        target_distance: cfg.task.target_distance,
        calibration_timeout: cfg.task.calibration_timeout,
        test_timeout: cfg.task.test_timeout,
        max_attempts: cfg.task.max_attempts,
    };
    let mut brain = cfg.brain.build(settings.limits.v_max).map_err(|e| Failure::from_lib(e, "brain"))?;
    let load = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let log = run_session(decoder, &mut brain, &plan, &settings, seed).map_err(|e| Failure::from_lib(e, "session"))?;
    let run = t1.elapsed().as_secs_f64();

    let t2 = Instant::now();
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut outputs = Vec::new();
    let mut buf = Vec::new();
    log.write_jsonl(&mut buf).map_err(|e| Failure::from_lib(e, "session log"))?;
    emit(out_dir, "session.jsonl", &buf, &mut outputs)?;
    buf.clear();
    write_metrics_csv(&mut buf, &log.blocks).map_err(|e| Failure::from_lib(e, "metrics"))?;
    emit(out_dir, "metrics.csv", &buf, &mut outputs)?;
    let (speeds, post) = log.test_speed_weights();
    let buckets = weight_speed_histogram(&speeds, &post, settings.limits.v_max).map_err(|e| Failure::from_lib(e, "weights"))?;
    let ids = log.blocks.last().map(|b| b.model_ids.clone()).unwrap_or_default();
    buf.clear();
    write_weights_by_speed_csv(&mut buf, &buckets, &ids).map_err(|e| Failure::from_lib(e, "weights"))?;
    emit(out_dir, "weights_by_speed.csv", &buf, &mut outputs)?;
    let write = t2.elapsed().as_secs_f64();

    let manifest = RunManifest {
        command: "session",
        config_path: config.display().to_string(),
        config_sha256: hash,
        seed,
        decoder: Some(decoder.to_string()),
        alphas: None,
        versions: versions(),
        outputs,
        phases: vec![Phase { name: "load", seconds: load }, Phase { name: "run", seconds: run }, Phase { name: "write", seconds: write }],
    };
    write_atomic(&out_dir.join("manifest.json"), &serde_json::to_vec_pretty(&manifest).context("manifest")?)?;
    Ok(())
}

fn cmd_offline(config: &Path, alphas: &[f64], seed: u64, out_dir: &Path) -> Result<(), Failure> {
    let t0 = Instant::now();
    let (bytes, hash) = read_config(config)?;
    let cfg: OfflineConfig = parse(&bytes, config)?;
    cfg.validate().map_err(|e| Failure::from_lib(e, "offline config"))?;
    let load = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let report = run_offline(&cfg, alphas, seed, true).map_err(|e| Failure::from_lib(e, "offline run"))?;
    let run = t1.elapsed().as_secs_f64();

    let t2 = Instant::now();
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut outputs = Vec::new();
    let mut buf = Vec::new();
    report.write_table_csv(&mut buf).map_err(|e| Failure::from_lib(e, "table"))?;
    emit(out_dir, "table.csv", &buf, &mut outputs)?;
    buf.clear();
    write_dominance_csv(&mut buf, &report.posteriors, &report.truth_schedule, &report.model_ids).map_err(|e| Failure::from_lib(e, "dominance"))?;
    emit(out_dir, "dominance.csv", &buf, &mut outputs)?;
    let write = t2.elapsed().as_secs_f64();

    let manifest = RunManifest {
        command: "offline",
        config_path: config.display().to_string(),
        config_sha256: hash,
        seed,
        decoder: None,
        alphas: Some(alphas.to_vec()),
        versions: versions(),
        outputs,
        phases: vec![Phase { name: "load", seconds: load }, Phase { name: "run", seconds: run }, Phase { name: "write", seconds: write }],
    };
    write_atomic(&out_dir.join("manifest.json"), &serde_json::to_vec_pretty(&manifest).context("manifest")?)?;
    Ok(())
}

fn cmd_verify(suite: Suite) -> ExitCode {
    let results = run_suite(suite);
    for r in &results {
        println!("{r}");
    }
    if results.iter().all(|r| r.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.cmd {
        Command::Session { config, decoder, seed, out_dir } => cmd_session(&config, decoder, seed, &out_dir),
        Command::Offline { config, alphas, seed, out_dir } => cmd_offline(&config, &alphas, seed, &out_dir),
        Command::Verify { suite } => return cmd_verify(suite),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Calibration(e)) => {
            eprintln!("{e:#}");
            ExitCode::from(3)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
