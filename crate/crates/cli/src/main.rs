use std::path::PathBuf;
use std::process::ExitCode;

use adaptmeta_cli::config::RunConfig;
use adaptmeta_cli::pipeline::{
    cmd_collect, cmd_evaluate, cmd_meta_train, cmd_report, cmd_train_acmrr, cmd_train_ensemble, summary, EvalInputs,
    Existing, PipelineError,
};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "adaptmeta",
    version,
    about = "Meta-learned adaptive control: data, training and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat TOML config; `ADAPTMETA_<KEY>` variables override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Replace a non-empty output directory.
    #[arg(long)]
    force: bool,
    /// Exit with a nonzero status if any evaluation run diverged.
    #[arg(long)]
    strict: bool,
    /// Worker threads (overrides the config; 0 = one per core).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Clone)]
struct Stage {
    /// Replicate index (overrides the config).
    #[arg(long)]
    replicate: Option<u64>,
    /// Ensemble size (default: first of `m_values`).
    #[arg(long)]
    m: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Fly the data-collection campaign and write one CSV per trajectory.
    Collect {
        #[command(flatten)]
        common: Common,
    },
    /// Fit one dynamics model per sampled trajectory.
    TrainEnsemble {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        stage: Stage,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Meta-train features and gains through closed-loop rollouts.
    MetaTrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ensemble: PathBuf,
    },
    /// Meta-train features through ridge regression (baseline).
    TrainAcmrr {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        stage: Stage,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Evaluate trained methods and PID on the shared test sets.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Output directories of meta-train runs.
        #[arg(long)]
        ours: Vec<PathBuf>,
        /// Output directories of train-acmrr runs.
        #[arg(long)]
        acmrr: Vec<PathBuf>,
    },
    /// Run every stage for all replicates and ensemble sizes, then evaluate.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Collect { common }
            | Command::TrainEnsemble { common, .. }
            | Command::MetaTrain { common, .. }
            | Command::TrainAcmrr { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Report { common } => common,
        }
    }
}

fn resolve(common: &Common) -> Result<RunConfig, PipelineError> {
    let mut cfg = RunConfig::load(common.config.as_deref(), std::env::vars())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(t) = common.threads {
        cfg.threads = t;
    }
    Ok(cfg)
}

fn stage_ids(cfg: &RunConfig, stage: &Stage) -> (u64, usize) {
    (
        stage.replicate.unwrap_or(cfg.replicate),
        stage.m.unwrap_or(cfg.m_values[0]),
    )
}

fn run(cli: Cli) -> Result<ExitCode, PipelineError> {
    let common = cli.command.common().clone();
    let cfg = resolve(&common)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| PipelineError::Input(e.to_string()))?;
    let existing = Existing::from_force(common.force);
    let out = common.out.as_path();
    pool.install(|| {
        let report = match &cli.command {
            Command::Collect { .. } => {
                let regenerated = cmd_collect(&cfg, out, existing)?;
                eprintln!(
                    "collected {} trajectories ({regenerated} regenerated after divergence)",
                    cfg.n_traj
                );
                None
            }
            Command::TrainEnsemble { stage, dataset, .. } => {
                let (r, m) = stage_ids(&cfg, stage);
                let models = cmd_train_ensemble(&cfg, dataset, out, existing, r, m)?;
                eprintln!("trained {} models", models.len());
                None
            }
            Command::MetaTrain { ensemble, .. } => {
                if let Some(s) = cmd_meta_train(&cfg, ensemble, out, existing)? {
                    eprintln!("best validation loss {:.6e} at step {}", s.best_valid, s.best_step);
                }
                None
            }
            Command::TrainAcmrr { stage, dataset, .. } => {
                let (r, m) = stage_ids(&cfg, stage);
                if let Some(s) = cmd_train_acmrr(&cfg, dataset, out, existing, r, m)? {
                    eprintln!("best validation loss {:.6e} at step {}", s.best_valid, s.best_step);
                }
                None
            }
            Command::Evaluate { ours, acmrr, .. } => {
                let inputs = EvalInputs {
                    ours: ours.clone(),
                    acmrr: acmrr.clone(),
                };
                Some(cmd_evaluate(&cfg, &inputs, out, existing)?)
            }
            Command::Report { .. } => Some(cmd_report(&cfg, out, common.force, |s| eprintln!("[{s}]"))?),
        };
        if let Some(report) = report {
            println!(
                "{:<6} {:<8} {:>4} {:>12} {:>12} {:>12} {:>4}",
                "method", "gains", "M", "rms-error", "sd", "rms-effort", "div"
            );
            for s in summary(&report) {
                println!(
                    "{:<6} {:<8} {:>4} {:>12.5} {:>12.5} {:>12.5} {:>4}",
                    s.method, s.gain_id, s.m, s.mean_error, s.sd_error, s.mean_effort, s.diverged
                );
            }
            println!(
                "test winds above the training support: {}",
                report.above_training_support()
            );
            if common.strict && report.diverged() > 0 {
                eprintln!("{} evaluation runs diverged", report.diverged());
                return Ok(ExitCode::from(2));
            }
        }
        Ok(ExitCode::SUCCESS)
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
