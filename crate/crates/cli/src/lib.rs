//! The `jsnorm` command-line lab.
//!
//! Exit codes: 0 on success, 1 for runtime or data failures (unreadable or
//! corrupt files, divergence, failed gradient checks), 2 for usage and
//! validation errors.

pub mod checkpoint;
pub mod config;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use jsnorm::gradcheck::{check_suite, GradCheckConfig, Tolerances};
use jsnorm::norm::NormKind;
use jsnorm::risk::{dominance_sweep, write_csv, Estimator};
use jsnorm::train::{
    export_stats_histogram, make_synthetic_dataset, train, write_histogram_csv, write_metrics_csv,
    RunMetrics, ToyNet,
};
use jsnorm::{ShrinkKind, ShrinkPolicy};

use crate::config::ExperimentConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

fn usage(e: impl ToString) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime(e: impl ToString) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "jsnorm", version, about = "James-Stein normalization lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Monte Carlo risk of mean estimators under squared error.
    RiskSim(RiskSimArgs),
    /// Compare analytic normalization gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Train a toy network from a JSON config.
    Train(TrainArgs),
    /// Histogram the running statistics stored in a checkpoint.
    StatsHist(StatsHistArgs),
}

#[derive(Debug, Args)]
pub struct RiskSimArgs {
    #[arg(long)]
    pub dim: usize,
    #[arg(long, default_value_t = 100_000)]
    pub trials: usize,
    /// Comma-separated list of ||theta|| values.
    #[arg(long, value_delimiter = ',', required = true)]
    pub theta_norms: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "mle,js_classic")]
    pub estimators: Vec<String>,
    #[arg(long, env = "JSNORM_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Output CSV path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LayerArg {
    Bn,
    Ln,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PolicyArg {
    JsPlain,
    JsPositivePart,
    None,
}

impl PolicyArg {
    pub fn policy(self) -> ShrinkPolicy {
        ShrinkPolicy::new(match self {
            PolicyArg::JsPlain => ShrinkKind::JsPlain,
            PolicyArg::JsPositivePart => ShrinkKind::JsPositivePart,
            PolicyArg::None => ShrinkKind::None,
        })
    }
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum)]
    pub layer: LayerArg,
    /// Input shape as n,c,h,w.
    #[arg(long)]
    pub shape: String,
    #[arg(long, default_value_t = 20)]
    pub configs: usize,
    #[arg(long, env = "JSNORM_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol_rel: f64,
    #[arg(long, default_value_t = 1e-7)]
    pub tol_abs: f64,
    #[arg(long, value_enum, default_value = "js-plain")]
    pub policy: PolicyArg,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Override train.seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override train.epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Override train.batch_size.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Override train.learning_rate.
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Override train.shrink_policy's kind.
    #[arg(long, value_enum)]
    pub policy: Option<PolicyArg>,
    /// Metrics CSV path; stdout when omitted.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Also train the same config with shrinkage disabled and print both
    /// final accuracies.
    #[arg(long)]
    pub compare_baseline: bool,
}

#[derive(Debug, Args)]
pub struct StatsHistArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
    pub bins: u64,
    /// Output CSV path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::RiskSim(a) => risk_sim(&a),
        Command::Gradcheck(a) => gradcheck(&a),
        Command::Train(a) => train_cmd(&a),
        Command::StatsHist(a) => stats_hist(&a),
    }
}

/// Writes `render`'s output to `path`, or to stdout.
fn emit(
    path: Option<&Path>,
    render: impl FnOnce(&mut dyn Write) -> io::Result<()>,
) -> Result<(), CliError> {
    let result = match path {
        Some(p) => {
            let file = File::create(p)
                .map_err(|e| runtime(format!("cannot create {}: {e}", p.display())))?;
            let mut w = BufWriter::new(file);
            render(&mut w).and_then(|_| w.flush())
        }
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            render(&mut lock).and_then(|_| lock.flush())
        }
    };
    result.map_err(|e| runtime(format!("write failed: {e}")))
}

fn risk_sim(a: &RiskSimArgs) -> Result<(), CliError> {
    if a.dim == 0 {
        return Err(usage("--dim must be at least 1"));
    }
    if a.trials < 2 {
        return Err(usage("--trials must be at least 2"));
    }
    if let Some(bad) = a
        .theta_norms
        .iter()
        .find(|v| !(**v >= 0.0 && v.is_finite()))
    {
        return Err(usage(format!(
            "--theta-norms entries must be finite and >= 0, got {bad}"
        )));
    }
    let estimators = a
        .estimators
        .iter()
        .map(|s| s.trim().parse::<Estimator>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(usage)?;
    let sweep =
        dominance_sweep(a.dim, &a.theta_norms, &estimators, a.trials, a.seed).map_err(runtime)?;
    let reports: Vec<_> = sweep.into_iter().flat_map(|p| p.reports).collect();
    emit(a.out.as_deref(), |w| write_csv(&reports, w))
}

pub fn parse_shape(s: &str) -> Result<[usize; 4], CliError> {
    let parts = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| usage(format!("--shape {s:?}: {e}")))?;
    <[usize; 4]>::try_from(parts)
        .map_err(|p| usage(format!("--shape needs n,c,h,w; got {} values", p.len())))
}

fn gradcheck(a: &GradcheckArgs) -> Result<(), CliError> {
    let shape = parse_shape(&a.shape)?;
    if shape.contains(&0) {
        return Err(usage("--shape extents must be positive"));
    }
    if a.configs == 0 {
        return Err(usage("--configs must be at least 1"));
    }
    if !(a.tol_rel > 0.0 && a.tol_abs >= 0.0) {
        return Err(usage("tolerances must be positive"));
    }
    let kind = match a.layer {
        LayerArg::Bn => NormKind::Bn,
        LayerArg::Ln => NormKind::Ln,
    };
    let tol = Tolerances {
        rel: a.tol_rel,
        abs: a.tol_abs,
    };
    let configs: Vec<GradCheckConfig> = (0..a.configs as u64)
        .map(|k| {
            GradCheckConfig::new(kind, shape, a.seed.wrapping_add(k))
                .with_policy(a.policy.policy())
                .with_tolerances(tol)
        })
        .collect();
    let report = check_suite(&configs).map_err(runtime)?;
    println!("layer: {:?}", kind);
    println!("shape: {:?}", shape);
    println!("configs_tested: {}", report.configs_tested);
    println!("max_rel_err: {:e}", report.max_rel_err);
    println!("max_abs_err: {:e}", report.max_abs_err);
    if let Some(w) = report.worst_index {
        println!("worst: config {} {:?} {:?}", w.config, w.target, w.index);
    }
    println!("result: {}", if report.passed { "PASS" } else { "FAIL" });
    if report.passed {
        Ok(())
    } else {
        Err(runtime("gradient check failed"))
    }
}

/// Builds the data and network for `cfg` and trains; validation problems are
/// usage errors, anything during training is a runtime error.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(ToyNet, RunMetrics), CliError> {
    let data = make_synthetic_dataset(&cfg.dataset).map_err(usage)?;
    let mut net = ToyNet::build(
        &cfg.net,
        data.sample_shape(),
        data.classes,
        &cfg.train.shrink_policy,
        cfg.train.seed,
    )
    .map_err(usage)?;
    cfg.train.validate_for(&net).map_err(usage)?;
    let metrics = train(&mut net, &data, &cfg.train).map_err(runtime)?;
    Ok((net, metrics))
}

fn train_cmd(a: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(&a.config).map_err(|e| match e {
        config::ConfigError::Io { .. } => runtime(e),
        config::ConfigError::Parse { .. } => usage(e),
    })?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    if let Some(epochs) = a.epochs {
        cfg.train.epochs = epochs;
    }
    if let Some(bs) = a.batch_size {
        cfg.train.batch_size = bs;
    }
    if let Some(lr) = a.learning_rate {
        cfg.train.learning_rate = lr;
    }
    if let Some(p) = a.policy {
        cfg.train.shrink_policy.kind = p.policy().kind;
    }

    let (net, metrics) = run_experiment(&cfg)?;
    emit(a.metrics.as_deref(), |w| write_metrics_csv(&metrics, w))?;
    if let Some(path) = &a.checkpoint {
        checkpoint::save(&net, path).map_err(runtime)?;
    }
    let last = metrics.epochs.last();
    eprintln!(
        "final: train_acc={} test_acc={}",
        last.map_or(f64::NAN, |e| e.train_acc),
        last.map_or(f64::NAN, |e| e.test_acc)
    );

    if a.compare_baseline {
        let mut base = cfg.clone();
        base.train.shrink_policy = ShrinkPolicy::none();
        let (_, base_metrics) = run_experiment(&base)?;
        let js = metrics.final_test_acc().unwrap_or(f64::NAN);
        let bn = base_metrics.final_test_acc().unwrap_or(f64::NAN);
        eprintln!("baseline (shrinkage off): test_acc={bn}");
        eprintln!("configured policy:        test_acc={js}");
        eprintln!("difference: {:+.2} pp", 100.0 * (js - bn));
    }
    Ok(())
}

fn stats_hist(a: &StatsHistArgs) -> Result<(), CliError> {
    let net = checkpoint::load(&a.checkpoint).map_err(runtime)?;
    let hists = export_stats_histogram(&net, a.bins as usize).map_err(runtime)?;
    emit(a.out.as_deref(), |w| write_histogram_csv(&hists, w))?;
    for h in &hists {
        eprintln!(
            "{}: mean|running_mean|={} mean running_var={}",
            h.layer, h.mean_abs_running_mean, h.mean_running_var
        );
    }
    Ok(())
}
