//! Command implementations for the `dpgrad` binary.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use dpgrad_core::baselines::run_naive;
use dpgrad_core::environments::{generate_instance_seeded, validate_instance, GroundTruth, ValidationReport};
use dpgrad_core::factorization::{Hyperparams, Mode, ProblemDims};
use dpgrad_core::learner::{run_continual, Method, SnapshotCadence};
use dpgrad_core::lowerbound::{adversary_game, summarize, witness_checks, GameConfig};
use dpgrad_core::report::{
    game_summary_line, load_instance, read_json, save_instance, to_json_string, write_json, write_trace,
    Checkpoint, GameFile, RunSummary,
};
use dpgrad_core::seeded_rng;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] dpgrad_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Config { path: PathBuf, source: serde_json::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Usage(String),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Whether a command met its acceptance condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    CriteriaNotMet,
}

impl Outcome {
    fn from_bool(ok: bool) -> Self {
        if ok {
            Outcome::Success
        } else {
            Outcome::CriteriaNotMet
        }
    }

    pub fn exit_code(self) -> u8 {
        match self {
            Outcome::Success => 0,
            Outcome::CriteriaNotMet => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "dpgrad", version, about = "Continual learning with doubly projected gradient descent")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a ground-truth instance and validate it.
    Generate(CommonArgs),
    /// Run a learner over every task of an instance.
    Run(RunArgs),
    /// Play the quadratic-CNN adversary game over a grid of committed prompts.
    Lowerbound(LowerboundArgs),
    /// Pretty-print a summary JSON file.
    Report { path: PathBuf },
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Instance file; generated from the config when absent.
    #[arg(long)]
    pub instance: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
}

#[derive(Debug, Args)]
pub struct LowerboundArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Only evaluate the two realizability witnesses.
    #[arg(long)]
    pub witness_only: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Dpgrad,
    Naive,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Dpgrad => Method::Dpgrad,
            MethodArg::Naive => Method::Naive,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Theory,
    Practical,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Theory => Mode::Theory,
            ModeArg::Practical => Mode::Practical,
        }
    }
}

fn default_epsilon() -> f64 {
    1e-3
}

fn default_method() -> Method {
    Method::Dpgrad
}

fn default_mode() -> Mode {
    Mode::Practical
}

/// Configuration for `generate` and `run`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub d: usize,
    pub r: usize,
    pub k: usize,
    #[serde(rename = "D")]
    pub big_d: f64,
    pub nu: f64,
    pub novel_schedule: Vec<bool>,
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Snapshot every this many iterations; automatic when absent.
    #[serde(default)]
    pub snapshot_every: Option<usize>,
    #[serde(default)]
    pub sigma: Option<f64>,
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default)]
    pub t_max: Option<usize>,
    #[serde(default)]
    pub stop_target: Option<f64>,
}

impl RunConfig {
    pub fn dims(&self) -> CliResult<ProblemDims> {
        Ok(ProblemDims::new(self.d, self.r, self.k)?)
    }

    pub fn hyperparams(&self, dims: ProblemDims, big_d: f64, nu: f64) -> CliResult<Hyperparams> {
        let mut h = Hyperparams::for_mode(self.mode, dims, self.epsilon, nu, big_d);
        if let Some(s) = self.sigma {
            h.sigma = s;
        }
        if let Some(e) = self.eta {
            h.eta = e;
        }
        if let Some(t) = self.t_max {
            h.t_max = t;
        }
        if let Some(s) = self.stop_target {
            h.stop_target = s;
        }
        h.validate()?;
        Ok(h)
    }

    pub fn cadence(&self) -> SnapshotCadence {
        self.snapshot_every.map_or(SnapshotCadence::Auto, SnapshotCadence::Every)
    }

    pub fn generate(&self) -> CliResult<GroundTruth> {
        let dims = self.dims()?;
        Ok(generate_instance_seeded(dims, self.big_d, self.nu, &self.novel_schedule, self.seed)?)
    }
}

fn default_range() -> f64 {
    3.0
}

fn default_resolution() -> f64 {
    0.05
}

fn default_starts() -> usize {
    64
}

fn default_epsilon_bar() -> f64 {
    1e-3
}

/// Configuration for `lowerbound`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LowerboundConfig {
    #[serde(default = "default_range")]
    pub range: f64,
    #[serde(default = "default_resolution")]
    pub resolution: f64,
    #[serde(default = "default_starts")]
    pub starts: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_epsilon_bar")]
    pub epsilon_bar: f64,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl LowerboundConfig {
    pub fn game_config(&self) -> GameConfig {
        GameConfig {
            range: self.range,
            resolution: self.resolution,
            starts: self.starts,
            seed: self.seed,
            ..GameConfig::default()
        }
    }
}

fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| CliError::Config {
        path: path.to_path_buf(),
        source,
    })
}

fn out_dir(flag: &Option<PathBuf>, config: &Option<PathBuf>) -> CliResult<PathBuf> {
    let dir = flag.clone().or_else(|| config.clone()).unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir).map_err(|source| CliError::Io {
        path: dir.clone(),
        source,
    })?;
    Ok(dir)
}

fn print_validation(report: &ValidationReport) {
    if report.passed() {
        println!("validator: pass (rank {})", report.rank);
    } else {
        println!("validator: FAIL");
        for p in &report.problems {
            println!("  {p}");
        }
    }
}

pub fn run_cli(cli: Cli) -> CliResult<Outcome> {
    match cli.command {
        Command::Generate(args) => cmd_generate(&args),
        Command::Run(args) => cmd_run(&args),
        Command::Lowerbound(args) => cmd_lowerbound(&args),
        Command::Report { path } => cmd_report(&path),
    }
}

pub fn cmd_generate(args: &CommonArgs) -> CliResult<Outcome> {
    let mut config: RunConfig = read_config(&args.config)?;
    if let Some(s) = args.seed {
        config.seed = s;
    }
    let gt = config.generate()?;
    let dir = out_dir(&args.out, &config.out)?;
    let path = dir.join("instance.json");
    save_instance(&path, &gt)?;
    println!("wrote {}", path.display());
    let report = validate_instance(&gt);
    print_validation(&report);
    Ok(Outcome::from_bool(report.passed()))
}

pub fn cmd_run(args: &RunArgs) -> CliResult<Outcome> {
    let mut config: RunConfig = read_config(&args.common.config)?;
    if let Some(s) = args.common.seed {
        config.seed = s;
    }
    if let Some(m) = args.method {
        config.method = m.into();
    }
    if let Some(m) = args.mode {
        config.mode = m.into();
    }
    let gt = match &args.instance {
        Some(path) => {
            if !path.exists() {
                return Err(CliError::Usage(format!("instance file {} does not exist", path.display())));
            }
            load_instance(path)?
        }
        None => config.generate()?,
    };
    let validation = validate_instance(&gt);
    print_validation(&validation);
    let h = config.hyperparams(gt.dims, gt.big_d, gt.nu)?;
    let dir = out_dir(&args.common.out, &config.out)?;

    let start = Instant::now();
    let mut rng = seeded_rng(config.seed);
    let (state, report) = match config.method {
        Method::Dpgrad => run_continual(&gt, &h, &mut rng, config.cadence())?,
        Method::Naive => run_naive(&gt, &h, &mut rng, config.cadence())?,
    };
    let elapsed = start.elapsed().as_secs_f64();

    let config_value = serde_json::to_value(&config)?;
    let summary = RunSummary::new(config_value.clone(), config.seed, &report);
    let trace_path = dir.join("trace.csv");
    let file = File::create(&trace_path).map_err(|source| CliError::Io {
        path: trace_path.clone(),
        source,
    })?;
    write_trace(BufWriter::new(file), &config_value, &report)?;
    write_json(&dir.join("summary.json"), &summary)?;
    write_json(
        &dir.join("checkpoint.json"),
        &Checkpoint::capture(&state, gt.dims.k, config.seed, &rng),
    )?;
    write_json(&dir.join("timing.json"), &serde_json::json!({ "wall_clock_seconds": elapsed }))?;

    println!(
        "{}: {} tasks, converged {}, recovered {}, max forgetting {:.3e} (epsilon {:.1e}), {:.2}s",
        config.method.tag(),
        summary.tasks.len(),
        summary.all_converged,
        summary.all_recovered,
        summary.forgetting.max_forgetting,
        summary.epsilon,
        elapsed
    );
    println!("wrote {}", dir.display());
    Ok(Outcome::from_bool(summary.success() && validation.passed()))
}

pub fn cmd_lowerbound(args: &LowerboundArgs) -> CliResult<Outcome> {
    let mut config: LowerboundConfig = read_config(&args.common.config)?;
    if let Some(s) = args.common.seed {
        config.seed = s;
    }
    let game = config.game_config();
    game.validate()?;
    let dir = out_dir(&args.common.out, &config.out)?;
    let witnesses = witness_checks();
    for w in &witnesses {
        println!(
            "witness {:?}: w={:?} v1={:?} v2={:?} loss1={} loss2={}",
            w.branch, w.w, w.v1, w.v2, w.loss1, w.loss2
        );
    }
    let witnesses_exact = witnesses.iter().all(|w| w.loss1 == 0.0 && w.loss2 == 0.0);
    if args.witness_only {
        write_json(&dir.join("witnesses.json"), &witnesses)?;
        return Ok(Outcome::from_bool(witnesses_exact));
    }
    let reports = adversary_game(&game, config.epsilon_bar)?;
    let summary = summarize(&reports, config.epsilon_bar);
    println!("{}", game_summary_line(&summary));
    let success = summary.success();
    write_json(
        &dir.join("game.json"),
        &GameFile {
            config: serde_json::to_value(&config)?,
            summary,
            reports,
        },
    )?;
    Ok(Outcome::from_bool(success))
}

pub fn cmd_report(path: &Path) -> CliResult<Outcome> {
    let value: Value = read_json(path)?;
    print!("{}", to_json_string(&value)?);
    Ok(Outcome::Success)
}
